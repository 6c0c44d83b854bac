"""Round-based agent simulation of forecasting-based school choice.

Each round walks the school-choice feedback loop once:

    fit forecaster on history (1b) -> predict for the new cohort (1b)
    -> recommend (1c) -> elicit submitted preferences (1a)
    -> match (2) -> realize outcomes (3) -> append to history

A fresh cohort arrives every round. Every random draw comes from a substream
keyed by (seed, round, stage), so runs are reproducible and adding a stage
never shifts the draws of another.
"""
from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields, replace
from enum import IntEnum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import forecast
from .forecast import Observation, PreferenceInputs, Prediction
from .matching import (
    Allocation,
    MatchingInstance,
    boston,
    deferred_acceptance,
    random_serial_dictatorship,
    serial_dictatorship,
)
from .metrics import (
    MetricError,
    MetricsRow,
    OutcomeRecord,
    disparate_impact,
    gini,
    prediction_accuracy,
    school_utility,
)

GROUPS = ("A", "B")
MECHANISM_NAMES = ("DA", "Boston", "SD", "RSD")

# Diagram process each executed step belongs to (school_choice fixture ids).
STEP_PROCESSES = (
    ("fit_forecaster", "1b"),
    ("predict", "1b"),
    ("recommend", "1c"),
    ("elicit_preferences", "1a"),
    ("match", "2"),
    ("realize_outcomes", "3"),
)


class Stage(IntEnum):
    COHORT = 0
    PRIORITY = 1
    PREDICT = 2
    MECHANISM = 3
    OUTCOME = 4
    SCHOOLS = 5


class ConfigError(ValueError):
    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("invalid config: " + "; ".join(self.problems))


@dataclass(frozen=True)
class SimConfig:
    n_students: int = 200
    n_schools: int = 5
    # None gives every school ceil(n_students * (1 + seat_slack) / n_schools)
    # seats; with zero slack seats are split exactly, remainder to the first schools.
    capacities: Optional[Tuple[int, ...]] = None
    seat_slack: float = 0.2
    rounds: int = 30
    mechanism: str = "DA"
    trust: float = 0.8
    sigma: float = 0.05
    window: Optional[int] = None
    recommend_k: Optional[int] = None
    support_cost: float = 0.1
    support_gain: float = 0.15
    w_ability: float = 0.5
    w_quality: float = 0.3
    outcome_noise: float = 0.05
    group_proportions: Tuple[float, float] = (0.5, 0.5)
    low_bucket_share: float = 0.4
    # Share of low-bucket students in group B; None means same as group A.
    group_b_low_share: Optional[float] = None
    # Fixed qualities, or None to draw them uniformly from quality_range.
    school_quality: Optional[Tuple[float, ...]] = None
    quality_range: Tuple[float, float] = (0.4, 0.6)
    strategic_schools: Tuple[str, ...] = ()
    favorable_threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("capacities", "school_quality"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, tuple(value))
        for name in ("group_proportions", "quality_range", "strategic_schools"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @property
    def school_ids(self) -> Tuple[str, ...]:
        width = len(str(max(self.n_schools - 1, 0)))
        return tuple(f"s{i:0{width}d}" for i in range(self.n_schools))

    def seat_counts(self) -> Tuple[int, ...]:
        if self.capacities is not None:
            return self.capacities
        if self.seat_slack > 0:
            seats = math.ceil(self.n_students * (1.0 + self.seat_slack) / self.n_schools)
            return (seats,) * self.n_schools
        base, extra = divmod(self.n_students, self.n_schools)
        return tuple(base + (1 if i < extra else 0) for i in range(self.n_schools))

    def problems(self) -> List[str]:
        out = []

        def prob(name, value):
            if not (isinstance(value, (int, float)) and 0.0 <= value <= 1.0):
                out.append(f"{name} must lie in [0, 1], got {value!r}")

        if not isinstance(self.n_students, int) or self.n_students < 1:
            out.append("n_students must be a positive integer")
        if not isinstance(self.n_schools, int) or self.n_schools < 1:
            out.append("n_schools must be a positive integer")
        if not isinstance(self.rounds, int) or self.rounds < 1:
            out.append("rounds must be >= 1")
        if self.mechanism not in MECHANISM_NAMES:
            out.append(f"mechanism must be one of {', '.join(MECHANISM_NAMES)}, got {self.mechanism!r}")
        for name in ("trust", "low_bucket_share", "favorable_threshold"):
            prob(name, getattr(self, name))
        if self.group_b_low_share is not None:
            prob("group_b_low_share", self.group_b_low_share)
        for name in ("seat_slack", "sigma", "support_cost", "support_gain", "w_ability", "w_quality", "outcome_noise"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or value < 0:
                out.append(f"{name} must be a nonnegative number, got {value!r}")
        if not out and self.w_ability + self.w_quality + self.support_gain > 1.0 + 1e-12:
            out.append("w_ability + w_quality + support_gain must not exceed 1")
        if self.window is not None and (not isinstance(self.window, int) or self.window < 1):
            out.append("window must be a positive integer or null")
        if self.recommend_k is not None and (not isinstance(self.recommend_k, int) or self.recommend_k < 1):
            out.append("recommend_k must be a positive integer or null")
        if len(self.group_proportions) != 2:
            out.append("group_proportions must have two entries")
        else:
            for p in self.group_proportions:
                prob("group_proportions", p)
            if abs(sum(self.group_proportions) - 1.0) > 1e-9:
                out.append("group_proportions must sum to 1")
        if len(self.quality_range) != 2 or not 0.0 <= self.quality_range[0] <= self.quality_range[1] <= 1.0:
            out.append("quality_range must be [lo, hi] with 0 <= lo <= hi <= 1")
        if isinstance(self.n_schools, int) and self.n_schools >= 1:
            if self.capacities is not None:
                if len(self.capacities) != self.n_schools:
                    out.append("capacities must have n_schools entries")
                elif any(not isinstance(c, int) or c < 0 for c in self.capacities):
                    out.append("capacities must be nonnegative integers")
                elif isinstance(self.n_students, int) and sum(self.capacities) < self.n_students:
                    out.append("capacities must sum to at least n_students")
            if self.school_quality is not None:
                if len(self.school_quality) != self.n_schools:
                    out.append("school_quality must have n_schools entries")
                else:
                    for q in self.school_quality:
                        prob("school_quality", q)
            unknown = set(self.strategic_schools) - set(self.school_ids)
            if unknown:
                out.append(f"strategic_schools names unknown schools {sorted(unknown)}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            out.append("seed must be a nonnegative integer")
        return out

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def to_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out

    @classmethod
    def from_dict(cls, obj: Mapping) -> "SimConfig":
        if not isinstance(obj, Mapping):
            raise ConfigError(["config must be a JSON object"])
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError([f"unknown config key {k!r}" for k in unknown])
        try:
            cfg = cls(**obj)
        except (TypeError, ValueError) as exc:
            raise ConfigError([str(exc)]) from None
        cfg.validate()
        return cfg


def load_config(path: Union[str, Path]) -> SimConfig:
    """Read a JSON config. Raises OSError for I/O and ConfigError for content."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"]) from None
    return SimConfig.from_dict(obj)


# ---------------------------------------------------------------------------
# agents and state


@dataclass(frozen=True)
class StudentAgent:
    id: str
    group: str
    bucket: str
    ability: float
    intrinsic: Mapping[str, float]
    trust: float


@dataclass(frozen=True)
class SchoolAgent:
    id: str
    capacity: int
    quality: float
    support_gain: float
    support_cost: float
    strategic: bool = False

    @property
    def policy(self) -> str:
        return "Strategic" if self.strategic else "Truthful"


@dataclass(frozen=True)
class SimState:
    config: SimConfig
    schools: Tuple[SchoolAgent, ...]
    cohort: Tuple[StudentAgent, ...]
    history: Tuple[Observation, ...] = ()
    round: int = 1


@dataclass(frozen=True)
class RoundOutput:
    round: int
    predictions: Tuple[Prediction, ...]
    recommendations: Mapping[str, Tuple[str, ...]]
    preferences: Mapping[str, Tuple[str, ...]]
    allocation: Mapping[str, str]
    records: Tuple[OutcomeRecord, ...]
    steps: Tuple[str, ...]


@dataclass
class RunResult:
    config: SimConfig
    seed: int
    rows: List[MetricsRow] = field(default_factory=list)
    trace: List[OutcomeRecord] = field(default_factory=list)


def stage_rng(seed: int, round_index: int, stage: Stage) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, round_index, int(stage)]))


def draw_cohort(cfg: SimConfig, round_index: int) -> Tuple[StudentAgent, ...]:
    rng = stage_rng(cfg.seed, round_index, Stage.COHORT)
    n, schools = cfg.n_students, cfg.school_ids
    in_a = rng.random(n) < cfg.group_proportions[0]
    low_b = cfg.low_bucket_share if cfg.group_b_low_share is None else cfg.group_b_low_share
    low_prob = np.where(in_a, cfg.low_bucket_share, low_b)
    is_low = rng.random(n) < low_prob
    # Ability sits in the lower or upper half of [0, 1] according to bucket.
    ability = rng.random(n) * 0.5 + np.where(is_low, 0.0, 0.5)
    intrinsic = rng.random((n, len(schools)))
    width = len(str(n - 1))
    return tuple(
        StudentAgent(
            id=f"r{round_index}-{i:0{width}d}",
            group=GROUPS[0] if in_a[i] else GROUPS[1],
            bucket="low" if is_low[i] else "high",
            ability=float(ability[i]),
            intrinsic=dict(zip(schools, map(float, intrinsic[i]))),
            trust=cfg.trust,
        )
        for i in range(n)
    )


def init_market(cfg: SimConfig) -> SimState:
    cfg.validate()
    rng = stage_rng(cfg.seed, 0, Stage.SCHOOLS)
    if cfg.school_quality is not None:
        quality = list(cfg.school_quality)
    else:
        lo, hi = cfg.quality_range
        quality = list(lo + (hi - lo) * rng.random(cfg.n_schools))
    strategic = set(cfg.strategic_schools)
    schools = tuple(
        SchoolAgent(sid, cap, float(q), cfg.support_gain, cfg.support_cost, sid in strategic)
        for sid, cap, q in zip(cfg.school_ids, cfg.seat_counts(), quality)
    )
    return SimState(cfg, schools, draw_cohort(cfg, 1))


# ---------------------------------------------------------------------------
# one loop traversal


def school_priorities(state: SimState) -> Tuple[str, ...]:
    """Common priority order: high bucket first, ties by a per-round lottery."""
    rng = stage_rng(state.config.seed, state.round, Stage.PRIORITY)
    lottery = rng.permutation(len(state.cohort))
    ranked = sorted(range(len(state.cohort)),
                    key=lambda i: (state.cohort[i].bucket != "high", lottery[i]))
    return tuple(state.cohort[i].id for i in ranked)


def run_mechanism(state: SimState, preferences: Mapping[str, Sequence[str]]) -> Allocation:
    cfg = state.config
    students = [s.id for s in state.cohort]
    priority = school_priorities(state)
    inst = MatchingInstance(
        students,
        [c.id for c in state.schools],
        preferences,
        {c.id: priority for c in state.schools},
        {c.id: c.capacity for c in state.schools},
    )
    if cfg.mechanism == "DA":
        return deferred_acceptance(inst)
    if cfg.mechanism == "Boston":
        return boston(inst)
    if cfg.mechanism == "SD":
        # Dictatorship order follows prior results.
        order = sorted(state.cohort, key=lambda s: (-s.ability, s.id))
        return serial_dictatorship(inst, [s.id for s in order])
    return random_serial_dictatorship(inst, stage_rng(cfg.seed, state.round, Stage.MECHANISM))


def realize_outcomes(state: SimState, allocation: Mapping[str, str]) -> List[OutcomeRecord]:
    """Outcome = clip(w_ability*ability + w_quality*quality + gain*supported + noise).

    Truthful schools support their low-bucket students; strategic ones never do.
    """
    cfg = state.config
    schools = {c.id: c for c in state.schools}
    rng = stage_rng(cfg.seed, state.round, Stage.OUTCOME)
    noise = rng.normal(0.0, cfg.outcome_noise, size=len(state.cohort)) if cfg.outcome_noise > 0 \
        else np.zeros(len(state.cohort))
    records = []
    for student, eps in zip(state.cohort, noise):
        school = schools[allocation[student.id]]
        supported = student.bucket == "low" and not school.strategic
        value = (cfg.w_ability * student.ability + cfg.w_quality * school.quality
                 + (school.support_gain if supported else 0.0) + float(eps))
        value = min(1.0, max(0.0, value))
        records.append(OutcomeRecord(
            state.round, student.id, student.group, student.bucket, school.id,
            value, value >= cfg.favorable_threshold, supported,
        ))
    return records


def run_round(state: SimState) -> Tuple[SimState, RoundOutput]:
    cfg = state.config
    school_ids = [c.id for c in state.schools]
    steps = []

    model = forecast.fit_forecaster(state.history, cfg.window)
    steps.append("fit_forecaster")

    pairs = [(s.id, s.bucket, c) for s in state.cohort for c in school_ids]
    preds = forecast.predict(model, pairs, cfg.sigma, stage_rng(cfg.seed, state.round, Stage.PREDICT))
    steps.append("predict")

    per_student: Dict[str, List[Prediction]] = defaultdict(list)
    for p in preds:
        per_student[p.student_id].append(p)
    k = cfg.recommend_k or len(school_ids)
    recommendations = {s.id: tuple(forecast.recommend(per_student[s.id], s.id, k)) for s in state.cohort}
    steps.append("recommend")

    preferences = {}
    for s in state.cohort:
        shown = set(recommendations[s.id])
        # Schools left off the recommendation list carry no predicted value.
        values = {p.school_id: (p.value if p.school_id in shown else 0.0) for p in per_student[s.id]}
        preferences[s.id] = tuple(forecast.elicit_preferences(PreferenceInputs(s.intrinsic, s.trust), values))
    steps.append("elicit_preferences")

    allocation = run_mechanism(state, preferences)
    steps.append("match")

    records = realize_outcomes(state, allocation)
    steps.append("realize_outcomes")

    new_obs = tuple(Observation(r.round, r.school_id, r.bucket, r.outcome) for r in records)
    nxt = replace(
        state,
        history=state.history + new_obs,
        round=state.round + 1,
        cohort=draw_cohort(cfg, state.round + 1),
    )
    out = RoundOutput(state.round, tuple(preds), recommendations, preferences,
                      allocation, tuple(records), tuple(steps))
    return nxt, out


def _nan_safe(fn, *args) -> float:
    try:
        return fn(*args)
    except MetricError:
        return math.nan


def round_metrics(state: SimState, out: RoundOutput) -> MetricsRow:
    assigned = {(s, c) for s, c in out.allocation.items()}
    preds = {(p.student_id, p.school_id): p.value for p in out.predictions
             if (p.student_id, p.school_id) in assigned}
    realized = {(r.student_id, r.school_id): r.outcome for r in out.records}
    mae, rmse = prediction_accuracy(preds, realized)
    by_school: Dict[str, List[OutcomeRecord]] = defaultdict(list)
    for r in out.records:
        by_school[r.school_id].append(r)
    means, utils, strategic = {}, {}, {}
    for c in state.schools:
        members = by_school.get(c.id, [])
        means[c.id] = math.fsum(r.outcome for r in members) / len(members) if members else math.nan
        utils[c.id] = school_utility(members, c.support_cost).value
        strategic[c.id] = c.strategic
    return MetricsRow(
        round=out.round,
        mae=mae,
        rmse=rmse,
        gini=_nan_safe(gini, [r.outcome for r in out.records]),
        disparate_impact=_nan_safe(disparate_impact, list(out.records), GROUPS[0], GROUPS[1]),
        school_mean=means,
        school_utility=utils,
        strategic=strategic,
    )


def run_simulation(cfg: SimConfig) -> RunResult:
    state = init_market(cfg)
    result = RunResult(cfg, cfg.seed)
    for _ in range(cfg.rounds):
        before = state
        state, out = run_round(state)
        result.rows.append(round_metrics(before, out))
        result.trace.extend(out.records)
    return result


# ---------------------------------------------------------------------------
# CSV output

TRACE_COLUMNS = ("round", "student_id", "group", "bucket", "school_id", "outcome", "favorable", "supported")


def fmt(x: float) -> str:
    return repr(float(x))


def trace_csv(result: RunResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for r in result.trace:
        w.writerow([r.round, r.student_id, r.group, r.bucket, r.school_id, fmt(r.outcome),
                    int(r.favorable), int(r.supported)])
    return buf.getvalue()


def metrics_columns(school_ids: Sequence[str]) -> List[str]:
    return (["round", "mae", "rmse", "gini", "disparate_impact"]
            + [f"mean_{s}" for s in school_ids] + [f"util_{s}" for s in school_ids])


def metrics_csv(result: RunResult) -> str:
    school_ids = result.config.school_ids
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(metrics_columns(school_ids))
    for row in result.rows:
        w.writerow([row.round, fmt(row.mae), fmt(row.rmse), fmt(row.gini), fmt(row.disparate_impact)]
                   + [fmt(row.school_mean[s]) for s in school_ids]
                   + [fmt(row.school_utility[s]) for s in school_ids])
    return buf.getvalue()


def config_json(cfg: SimConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def low_share_at(trace: Sequence[OutcomeRecord], round_index: int, schools: Sequence[str]) -> float:
    """Fraction of the round's low-bucket students matched to any of ``schools``."""
    low = [r for r in trace if r.round == round_index and r.bucket == "low"]
    if not low:
        return math.nan
    return sum(r.school_id in schools for r in low) / len(low)
