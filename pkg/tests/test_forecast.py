import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vasim.forecast import (
    COLD_START,
    Observation,
    PreferenceInputs,
    Prediction,
    dumps_history,
    elicit_preferences,
    fit_forecaster,
    loads_history,
    predict,
    recommend,
)


def obs(rows):
    return [Observation(*r) for r in rows]


def test_cold_start():
    f = fit_forecaster([])
    assert f.table == {} and f.global_mean == COLD_START


def test_cell_mean():
    f = fit_forecaster(obs([(0, "s1", "low", 0.2), (0, "s1", "low", 0.4)]))
    assert f.mean("s1", "low") == pytest.approx(0.3, abs=1e-15)


def test_window_drops_old_rounds():
    history = obs([(0, "s1", "low", 0.9), (1, "s1", "low", 0.2), (2, "s1", "low", 0.4),
                   (0, "s2", "high", 1.0), (2, "s2", "high", 0.6)])
    f = fit_forecaster(history, window=2)
    # Retained rounds are 1 and 2, by hand: (0.2 + 0.4) / 2 and 0.6 / 1.
    assert f.mean("s1", "low") == pytest.approx(0.3, abs=1e-15)
    assert f.table[("s2", "high")] == (0.6, 1)
    assert f.global_mean == pytest.approx((0.2 + 0.4 + 0.6) / 3, abs=1e-15)
    assert fit_forecaster(history).mean("s1", "low") == pytest.approx(0.5, abs=1e-15)


def test_bad_inputs():
    with pytest.raises(ValueError):
        fit_forecaster(obs([(0, "s", "low", 1.5)]))
    with pytest.raises(ValueError):
        fit_forecaster([], window=0)
    with pytest.raises(ValueError):
        predict(fit_forecaster([]), [("i", "low", "s")], -0.1, np.random.default_rng(0))


def test_zero_noise_prediction_and_fallback():
    f = fit_forecaster(obs([(0, "s1", "low", 0.2), (0, "s1", "low", 0.4), (0, "s2", "high", 0.9)]))
    out = predict(f, [("i", "low", "s1"), ("i", "low", "s2")], 0.0, np.random.default_rng(0))
    assert out[0].value == f.mean("s1", "low")
    assert out[1].value == f.global_mean


def test_noise_sample_mean():
    f = fit_forecaster(obs([(0, "s", "low", 0.5)]))
    pairs = [(f"i{k}", "low", "s") for k in range(10_000)]
    values = [p.value for p in predict(f, pairs, 0.1, np.random.default_rng(42))]
    # Mean 0.5 is far from both clamps, so clamping barely moves the average.
    assert abs(np.mean(values) - 0.5) < 3 * 0.1 / 100


def test_prediction_seeded():
    f = fit_forecaster(obs([(0, "s", "low", 0.5)]))
    pairs = [("i", "low", "s")] * 5
    a = predict(f, pairs, 0.3, np.random.default_rng(7))
    b = predict(f, pairs, 0.3, np.random.default_rng(7))
    assert a == b
    assert all(0.0 <= p.value <= 1.0 for p in a)


histories = st.lists(
    st.tuples(st.integers(0, 5), st.sampled_from(["s0", "s1", "s2"]),
              st.sampled_from(["low", "high"]), st.floats(0, 1)),
    max_size=40,
)


@settings(max_examples=300, deadline=None)
@given(histories, st.one_of(st.none(), st.integers(1, 6)))
def test_means_in_hull(rows, window):
    history = obs(rows)
    f = fit_forecaster(history, window)
    for (school, bucket), (mean, count) in f.table.items():
        contributing = [o.outcome for o in history if o.school_id == school and o.bucket == bucket]
        assert count >= 1
        assert min(contributing) <= mean <= max(contributing)


def test_recommend_examples():
    preds = [Prediction("i", "s1", 0.4), Prediction("i", "s2", 0.6), Prediction("j", "s1", 0.9)]
    assert recommend(preds, "i", 2) == ["s2", "s1"]
    assert recommend(preds, "i", 1) == ["s2"]
    assert recommend(preds, "j", 3) == ["s1"]
    tied = [Prediction("i", "s3", 0.5), Prediction("i", "s1", 0.5), Prediction("i", "s2", 0.5)]
    assert recommend(tied, "i", 3) == ["s1", "s2", "s3"]
    with pytest.raises(KeyError):
        recommend(preds, "nobody", 1)
    with pytest.raises(ValueError):
        recommend(preds, "i", 0)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(0, 100).map(lambda v: v / 100), min_size=1, max_size=6),
       st.sampled_from([lambda v: v ** 3, lambda v: math.exp(v), lambda v: 2 * v + 7]))
def test_recommend_argsort_invariance(values, transform):
    preds = [Prediction("i", f"s{k}", v) for k, v in enumerate(values)]
    moved = [Prediction("i", p.school_id, transform(p.value)) for p in preds]
    k = len(values)
    assert recommend(preds, "i", k) == recommend(moved, "i", k)


def test_elicit_examples():
    intrinsic = {"s1": 0.0, "s2": 0.8}
    preds = {"s1": 1.0, "s2": 0.0}
    assert elicit_preferences(PreferenceInputs(intrinsic, 0.5), preds) == ["s1", "s2"]
    assert elicit_preferences(PreferenceInputs(intrinsic, 0.0), preds) == ["s2", "s1"]
    assert elicit_preferences(PreferenceInputs(intrinsic, 1.0), preds) == ["s1", "s2"]


def test_elicit_errors():
    with pytest.raises(ValueError):
        PreferenceInputs({"s1": 0.1}, 1.2)
    with pytest.raises(ValueError):
        elicit_preferences(PreferenceInputs({"s1": 0.1}, 0.5), {"s2": 0.3})


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=6))
def test_elicit_boundaries(pairs):
    schools = [f"s{k}" for k in range(len(pairs))]
    preds = {s: p for s, (p, _) in zip(schools, pairs)}
    intrinsic = {s: q for s, (_, q) in zip(schools, pairs)}
    by_pred = [p.school_id for p in sorted(
        (Prediction("i", s, v) for s, v in preds.items()), key=lambda p: (-p.value, p.school_id))]
    assert elicit_preferences(PreferenceInputs(intrinsic, 1.0), preds) == by_pred
    assert elicit_preferences(PreferenceInputs(intrinsic, 1.0), preds)[0] == recommend(
        [Prediction("i", s, v) for s, v in preds.items()], "i", 1)[0]
    assert elicit_preferences(PreferenceInputs(intrinsic, 0.0), preds) == sorted(
        schools, key=lambda s: (-intrinsic[s], s))


def test_history_csv_round_trip():
    history = obs([(0, "s1", "low", 0.1), (3, "s2", "high", 1 / 3)])
    text = dumps_history(history)
    assert text.splitlines()[0] == "round,school_id,bucket,outcome"
    assert loads_history(text) == history
    with pytest.raises(ValueError):
        loads_history("a,b\n1,2\n")
