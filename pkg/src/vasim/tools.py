"""Visibility tools as pure transformations over alternatives.

Every tool takes a list of :class:`Alternative` and returns a subset, a
permutation, scores, or per-alternative decisions. Inputs are never mutated.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, FrozenSet, List, Mapping, Sequence, Tuple, Union

Scalar = Union[int, float, str, bool, Tuple[str, ...]]

TEXT_TOKEN = re.compile(r"[a-z0-9]+")


class ToolError(ValueError):
    pass


@dataclass(frozen=True)
class Alternative:
    key: str
    attributes: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        attrs = {}
        for name, value in dict(self.attributes).items():
            if not name:
                raise ToolError(f"alternative {self.key!r} has an empty attribute name")
            attrs[name] = tuple(value) if isinstance(value, list) else value
        object.__setattr__(self, "attributes", attrs)

    def __hash__(self):
        return hash((self.key, tuple(sorted(self.attributes.items(), key=lambda kv: kv[0]))))


class Comparator(str, Enum):
    LT = "<"
    LE = "<="
    EQ = "="
    GE = ">="
    GT = ">"
    CONTAINS = "contains"
    IN = "in"


def _num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _compare(op: Comparator, value, constant) -> bool:
    if op is Comparator.EQ:
        return value == constant
    if op is Comparator.CONTAINS:
        if isinstance(value, str) and isinstance(constant, str):
            return constant in value
        if isinstance(value, tuple):
            return constant in value
        return False
    if op is Comparator.IN:
        try:
            return value in constant
        except TypeError:
            return False
    # Ordering comparators only between two numbers or two strings.
    if not ((_num(value) and _num(constant))
            or (isinstance(value, str) and isinstance(constant, str))):
        return False
    if op is Comparator.LT:
        return value < constant
    if op is Comparator.LE:
        return value <= constant
    if op is Comparator.GE:
        return value >= constant
    return value > constant


@dataclass(frozen=True)
class Evaluator:
    """A binary condition ``attributes[attribute] <op> constant``.

    Total: a missing attribute or a type mismatch evaluates to ``False``.
    """

    id: str
    attribute: str
    op: Comparator
    constant: Any

    def __post_init__(self):
        object.__setattr__(self, "op", Comparator(self.op))
        if self.op is Comparator.IN and not isinstance(self.constant, frozenset):
            object.__setattr__(self, "constant", frozenset(self.constant))
        elif isinstance(self.constant, list):
            object.__setattr__(self, "constant", tuple(self.constant))

    def __call__(self, alt: Alternative) -> bool:
        if self.attribute not in alt.attributes:
            return False
        return _compare(self.op, alt.attributes[self.attribute], self.constant)


class Severity(str, Enum):
    LOW = "low"
    HIGH = "high"


@dataclass(frozen=True)
class Policy:
    """An evaluator whose match marks a policy violation."""

    evaluator: Evaluator
    label: str = ""
    severity: Severity = Severity.HIGH

    def __post_init__(self):
        object.__setattr__(self, "severity", Severity(self.severity))

    @property
    def id(self) -> str:
        return self.evaluator.id


class Action(str, Enum):
    KEEP = "Keep"
    FLAG = "Flag"
    REMOVE = "Remove"


@dataclass(frozen=True)
class ModerationDecision:
    key: str
    action: Action
    violated: Tuple[str, ...] = ()


@dataclass(frozen=True)
class KeyFunction:
    attribute: str
    descending: bool = False
    missing: str = "last"  # or "error"

    def __post_init__(self):
        if self.missing not in ("last", "error"):
            raise ToolError(f"unknown missing policy {self.missing!r}")


@dataclass(frozen=True)
class Query:
    terms: Tuple[str, ...]
    target_attribute: str = "text"

    def __post_init__(self):
        terms = tuple(t.lower() for t in self.terms)
        if not terms:
            raise ToolError("query needs at least one term")
        object.__setattr__(self, "terms", terms)


def tokenize(text: str) -> List[str]:
    return TEXT_TOKEN.findall(text.lower())


def distinct_term_score(tokens: FrozenSet[str], terms: Sequence[str]) -> int:
    return len(set(terms) & tokens)


# ---------------------------------------------------------------------------


def filter_alternatives(alts: Sequence[Alternative], selected: Sequence[Evaluator]) -> List[Alternative]:
    """Keep exactly the alternatives satisfying all of ``selected``, in input order."""
    return [a for a in alts if all(ev(a) for ev in selected)]


def sort_alternatives(alts: Sequence[Alternative], key: KeyFunction) -> List[Alternative]:
    """Stable sort by ``key``; alternatives lacking the attribute go last (or raise)."""
    keyed, missing = [], []
    for a in alts:
        if key.attribute in a.attributes:
            keyed.append(a)
        elif key.missing == "error":
            raise ToolError(f"alternative {a.key!r} has no attribute {key.attribute!r}")
        else:
            missing.append(a)
    # sorted(reverse=True) keeps ties in input order, so stability holds both ways.
    try:
        keyed = sorted(keyed, key=lambda a: a.attributes[key.attribute], reverse=key.descending)
    except TypeError:
        raise ToolError(f"values of {key.attribute!r} are not mutually comparable") from None
    return keyed + missing


SCORE_ATTRIBUTE = "__score__"


def search(
    alts: Sequence[Alternative],
    q: Query,
    scorer: Callable[[FrozenSet[str], Sequence[str]], int] = distinct_term_score,
) -> List[Tuple[Alternative, int]]:
    """Retrieval (filter on score > 0) followed by ranking (sort by score, descending)."""
    if not q.terms:
        raise ToolError("query needs at least one term")
    by_key = {}
    scored = []
    for a in alts:
        text = a.attributes.get(q.target_attribute)
        score = scorer(frozenset(tokenize(text)), q.terms) if isinstance(text, str) else 0
        by_key[a.key] = a
        scored.append(Alternative(a.key, {SCORE_ATTRIBUTE: score}))
    retrieved = filter_alternatives(scored, [Evaluator("retrieve", SCORE_ATTRIBUTE, Comparator.GT, 0)])
    ranked = sort_alternatives(retrieved, KeyFunction(SCORE_ATTRIBUTE, descending=True))
    return [(by_key[s.key], s.attributes[SCORE_ATTRIBUTE]) for s in ranked]


def moderate(alts: Sequence[Alternative], policies: Sequence[Policy]) -> List[ModerationDecision]:
    decisions = []
    for a in alts:
        hit = [p for p in policies if p.evaluator(a)]
        if not hit:
            action = Action.KEEP
        elif any(p.severity is Severity.HIGH for p in hit):
            action = Action.REMOVE
        else:
            action = Action.FLAG
        decisions.append(ModerationDecision(a.key, action, tuple(p.id for p in hit)))
    return decisions


# ---------------------------------------------------------------------------
# JSON ingestion


def alternatives_from_json(data: Union[str, list]) -> List[Alternative]:
    rows = json.loads(data) if isinstance(data, str) else data
    alts = [Alternative(r["key"], r.get("attributes", {})) for r in rows]
    keys = [a.key for a in alts]
    if len(set(keys)) != len(keys):
        raise ToolError("duplicate alternative keys")
    return alts


def evaluator_from_dict(obj: Dict[str, Any]) -> Evaluator:
    return Evaluator(obj["id"], obj["attribute"], Comparator(obj["op"]), obj["value"])


def policy_from_dict(obj: Dict[str, Any]) -> Policy:
    return Policy(evaluator_from_dict(obj), obj.get("label", ""), Severity(obj.get("severity", "high")))


def load_alternatives(path: Union[str, Path]) -> List[Alternative]:
    return alternatives_from_json(Path(path).read_text(encoding="utf-8"))
