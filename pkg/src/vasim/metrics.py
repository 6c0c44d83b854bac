"""Tool-level and long-term metrics over simulation traces."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, NamedTuple, Sequence, Tuple

import numpy as np

DEFAULT_FAVORABLE_THRESHOLD = 0.5


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class OutcomeRecord:
    round: int
    student_id: str
    group: str
    bucket: str
    school_id: str
    outcome: float
    favorable: bool
    supported: bool = False


@dataclass
class MetricsRow:
    round: int
    mae: float
    rmse: float
    gini: float
    disparate_impact: float
    school_mean: Dict[str, float] = field(default_factory=dict)
    school_utility: Dict[str, float] = field(default_factory=dict)
    strategic: Dict[str, bool] = field(default_factory=dict)


def prediction_accuracy(
    preds: Mapping[Tuple[str, str], float], realized: Mapping[Tuple[str, str], float]
) -> Tuple[float, float]:
    """(MAE, RMSE) over the (student, school) pairs present in both mappings."""
    common = [k for k in preds if k in realized]
    if not common:
        raise MetricError("no matched (student, school) pairs")
    err = np.array([preds[k] - realized[k] for k in common], dtype=float)
    return float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err ** 2)))


def favorable_rate(records: Sequence[OutcomeRecord], group: str) -> float:
    members = [r for r in records if r.group == group]
    if not members:
        raise MetricError(f"group {group!r} has no records")
    return sum(r.favorable for r in members) / len(members)


def disparate_impact(records: Sequence[OutcomeRecord], group_a: str, group_b: str) -> float:
    """P(favorable | a) / P(favorable | b).

    ``inf`` when only the denominator rate is zero, 1.0 when both are.
    """
    ra = favorable_rate(records, group_a)
    rb = favorable_rate(records, group_b)
    if rb == 0.0:
        return 1.0 if ra == 0.0 else math.inf
    return ra / rb


def gini(outcomes: Iterable[float]) -> float:
    """Mean absolute difference over twice the mean, via the sorted form."""
    x = np.sort(np.asarray(list(outcomes), dtype=float))
    n = x.size
    if n == 0:
        raise MetricError("gini of an empty list")
    if np.any(x < 0):
        raise MetricError("gini needs nonnegative values")
    total = x.sum()
    if total == 0:
        raise MetricError("gini is undefined when every value is zero")
    # sum_ij |xi - xj| = 2 * sum_i (2i - n - 1) x_(i), i = 1..n
    i = np.arange(1, n + 1)
    # The weighted sum is nonnegative in exact arithmetic; rounding can dip below.
    return max(0.0, float(np.sum((2 * i - n - 1) * x) / (n * total)))


class SchoolUtility(NamedTuple):
    value: float
    empty: bool


def school_utility(records: Sequence[OutcomeRecord], support_cost: float) -> SchoolUtility:
    """Mean matched outcome minus ``support_cost`` times the supported share.

    A school with no matched students has utility 0 and ``empty=True``.
    """
    if not records:
        return SchoolUtility(0.0, True)
    n = len(records)
    mean = math.fsum(r.outcome for r in records) / n
    supported = sum(r.supported for r in records) / n
    return SchoolUtility(mean - support_cost * supported, False)


def welfare(utilities: Mapping[str, float], weights: Mapping[str, float]) -> float:
    """Weighted sum of stakeholder utilities; weights must cover every stakeholder."""
    missing = set(utilities) - set(weights)
    if missing:
        raise MetricError(f"no weight for stakeholders {sorted(missing)}")
    return math.fsum(weights[k] * u for k, u in utilities.items())
