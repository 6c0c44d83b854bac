"""Outcome forecasting, recommendation, and preference formation.

The forecaster is a bucketed empirical mean over historical
(school, prior-performance bucket) -> outcome observations. Predictions add
Gaussian noise whose scale is the accuracy knob.
"""
from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

BUCKETS = ("low", "high")
COLD_START = 0.5


class Observation(NamedTuple):
    round: int
    school_id: str
    bucket: str
    outcome: float


@dataclass(frozen=True)
class Forecaster:
    table: Dict[Tuple[str, str], Tuple[float, int]] = field(default_factory=dict)
    global_mean: float = COLD_START
    window: Optional[int] = None

    def mean(self, school_id: str, bucket: str) -> float:
        cell = self.table.get((school_id, bucket))
        return self.global_mean if cell is None else cell[0]


@dataclass(frozen=True)
class Prediction:
    student_id: str
    school_id: str
    value: float
    noise_sigma: float = 0.0


@dataclass(frozen=True)
class PreferenceInputs:
    intrinsic: Mapping[str, float]
    trust: float

    def __post_init__(self):
        if not 0.0 <= self.trust <= 1.0:
            raise ValueError(f"trust must lie in [0, 1], got {self.trust}")


def fit_forecaster(obs: Iterable[Observation], window: Optional[int] = None) -> Forecaster:
    """Per-(school, bucket) mean outcome over the last ``window`` rounds.

    ``window=None`` keeps the whole history. An empty history yields an empty
    table and the cold-start global mean 0.5.
    """
    obs = list(obs)
    if window is not None:
        if window < 1:
            raise ValueError("window must be >= 1 or None")
        if obs:
            latest = max(o.round for o in obs)
            obs = [o for o in obs if o.round > latest - window]
    if not obs:
        return Forecaster({}, COLD_START, window)

    cells: Dict[Tuple[str, str], List[float]] = defaultdict(list)
    for o in obs:
        if not 0.0 <= o.outcome <= 1.0:
            raise ValueError(f"outcome {o.outcome} outside [0, 1]")
        cells[(o.school_id, o.bucket)].append(o.outcome)
    # The final division can round one ulp past the data; clamp to the hull.
    table = {k: (min(max(math.fsum(v) / len(v), min(v)), max(v)), len(v)) for k, v in cells.items()}
    global_mean = math.fsum(o.outcome for o in obs) / len(obs)
    return Forecaster(table, global_mean, window)


def predict(
    f: Forecaster,
    pairs: Sequence[Tuple[str, str, str]],
    sigma: float,
    rng: np.random.Generator,
) -> List[Prediction]:
    """Predict outcomes for ``(student_id, bucket, school_id)`` triples."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    means = np.array([f.mean(school, bucket) for _, bucket, school in pairs], dtype=float)
    if sigma > 0:
        values = np.clip(means + rng.normal(0.0, sigma, size=len(pairs)), 0.0, 1.0)
    else:
        values = means
    return [
        Prediction(student, school, float(v), sigma)
        for (student, _, school), v in zip(pairs, values)
    ]


def recommend(preds: Sequence[Prediction], student_id: str, k: int) -> List[str]:
    """Top-``k`` schools for one student by predicted value; ties by school id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    mine = [p for p in preds if p.student_id == student_id]
    if not mine:
        raise KeyError(f"no predictions for student {student_id!r}")
    mine.sort(key=lambda p: (-p.value, p.school_id))
    return [p.school_id for p in mine[:k]]


def elicit_preferences(p: PreferenceInputs, preds: Mapping[str, float]) -> List[str]:
    """Submitted ranking from ``trust * prediction + (1 - trust) * intrinsic``."""
    if set(preds) != set(p.intrinsic):
        raise ValueError(
            f"prediction schools {sorted(preds)} do not match intrinsic schools {sorted(p.intrinsic)}")
    tau = p.trust
    score = {s: tau * preds[s] + (1.0 - tau) * p.intrinsic[s] for s in preds}
    return sorted(score, key=lambda s: (-score[s], s))


# ---------------------------------------------------------------------------
# history CSV

HISTORY_COLUMNS = ("round", "school_id", "bucket", "outcome")


def dumps_history(obs: Iterable[Observation]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for o in obs:
        w.writerow([o.round, o.school_id, o.bucket, repr(float(o.outcome))])
    return buf.getvalue()


def loads_history(text: str) -> List[Observation]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != HISTORY_COLUMNS:
        raise ValueError(f"history header must be {','.join(HISTORY_COLUMNS)}")
    return [
        Observation(int(r["round"]), r["school_id"], r["bucket"], float(r["outcome"]))
        for r in reader
    ]
