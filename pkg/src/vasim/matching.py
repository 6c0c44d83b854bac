"""School-choice matching mechanisms and their verification harnesses.

Mechanisms take a :class:`MatchingInstance` and return an allocation, a plain
``{student: school}`` dict. Every student is assigned: instances must have at
least as many seats as students.
"""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Callable, Dict, Iterator, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

Allocation = Dict[str, str]
Mechanism = Callable[["MatchingInstance"], Allocation]

# Exhaustive report enumeration is |schools|! per student.
MAX_ENUMERATION_SCHOOLS = 6


class MatchingError(ValueError):
    pass


@dataclass(frozen=True)
class MatchingInstance:
    students: Tuple[str, ...]
    schools: Tuple[str, ...]
    prefs: Mapping[str, Tuple[str, ...]]
    priorities: Mapping[str, Tuple[str, ...]]
    capacities: Mapping[str, int]

    def __post_init__(self):
        object.__setattr__(self, "students", tuple(self.students))
        object.__setattr__(self, "schools", tuple(self.schools))
        object.__setattr__(self, "prefs", {k: tuple(v) for k, v in self.prefs.items()})
        object.__setattr__(self, "priorities", {k: tuple(v) for k, v in self.priorities.items()})
        object.__setattr__(self, "capacities", dict(self.capacities))

    def problems(self) -> List[str]:
        out = []
        students, schools = set(self.students), set(self.schools)
        if len(students) != len(self.students):
            out.append("duplicate student ids")
        if len(schools) != len(self.schools):
            out.append("duplicate school ids")
        for s in self.students:
            p = self.prefs.get(s)
            if p is None:
                out.append(f"student {s!r} has no preference list")
            elif len(p) != len(schools) or set(p) != schools:
                out.append(f"preferences of {s!r} are not a permutation of the schools")
        for c in self.schools:
            p = self.priorities.get(c)
            if p is None:
                out.append(f"school {c!r} has no priority list")
            elif len(p) != len(students) or set(p) != students:
                out.append(f"priorities of {c!r} are not a permutation of the students")
            cap = self.capacities.get(c)
            if not isinstance(cap, int) or cap < 0:
                out.append(f"capacity of {c!r} must be a nonnegative integer")
        if not out and sum(self.capacities[c] for c in self.schools) < len(students):
            out.append("total capacity is below the number of students")
        return out

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            raise MatchingError("malformed instance: " + "; ".join(problems))

    def with_report(self, student: str, ranking: Sequence[str]) -> "MatchingInstance":
        prefs = dict(self.prefs)
        prefs[student] = tuple(ranking)
        return replace(self, prefs=prefs)

    def to_dict(self) -> dict:
        return {
            "students": list(self.students),
            "schools": list(self.schools),
            "prefs": {s: list(self.prefs[s]) for s in self.students},
            "priorities": {c: list(self.priorities[c]) for c in self.schools},
            "capacities": {c: self.capacities[c] for c in self.schools},
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "MatchingInstance":
        return cls(obj["students"], obj["schools"], obj["prefs"], obj["priorities"], obj["capacities"])

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _priority_rank(inst: MatchingInstance) -> Dict[str, Dict[str, int]]:
    return {c: {s: i for i, s in enumerate(inst.priorities[c])} for c in inst.schools}


def deferred_acceptance(inst: MatchingInstance) -> Allocation:
    """Student-proposing deferred acceptance with simultaneous proposals."""
    inst.validate()
    rank = _priority_rank(inst)
    next_choice = {s: 0 for s in inst.students}
    held: Dict[str, List[str]] = {c: [] for c in inst.schools}
    free = list(inst.students)
    while free:
        proposals: Dict[str, List[str]] = defaultdict(list)
        for s in free:
            school = inst.prefs[s][next_choice[s]]
            next_choice[s] += 1
            proposals[school].append(s)
        free = []
        for school, applicants in proposals.items():
            pool = held[school] + applicants
            pool.sort(key=rank[school].__getitem__)
            cap = inst.capacities[school]
            held[school] = pool[:cap]
            free.extend(pool[cap:])
    return {s: c for c in inst.schools for s in held[c]}


def boston(inst: MatchingInstance) -> Allocation:
    """Immediate acceptance: round k processes everyone's k-th choice, finally."""
    inst.validate()
    rank = _priority_rank(inst)
    remaining = dict(inst.capacities)
    assignment: Allocation = {}
    for k in range(len(inst.schools)):
        applicants: Dict[str, List[str]] = defaultdict(list)
        for s in inst.students:
            if s not in assignment:
                applicants[inst.prefs[s][k]].append(s)
        for school, group in applicants.items():
            group.sort(key=rank[school].__getitem__)
            accepted = group[:remaining[school]]
            for s in accepted:
                assignment[s] = school
            remaining[school] -= len(accepted)
        if len(assignment) == len(inst.students):
            break
    return assignment


def serial_dictatorship(inst: MatchingInstance, order: Sequence[str]) -> Allocation:
    inst.validate()
    if len(order) != len(inst.students) or set(order) != set(inst.students):
        raise MatchingError("order must be a permutation of the students")
    remaining = dict(inst.capacities)
    assignment: Allocation = {}
    for s in order:
        for school in inst.prefs[s]:
            if remaining[school] > 0:
                remaining[school] -= 1
                assignment[s] = school
                break
    return assignment


def random_serial_dictatorship(inst: MatchingInstance, rng: np.random.Generator) -> Allocation:
    order = [inst.students[i] for i in rng.permutation(len(inst.students))]
    return serial_dictatorship(inst, order)


def check_allocation(inst: MatchingInstance, a: Mapping[str, str]) -> None:
    if set(a) != set(inst.students):
        raise MatchingError("allocation does not assign exactly the instance's students")
    load: Dict[str, int] = defaultdict(int)
    for s, c in a.items():
        if c not in inst.capacities:
            raise MatchingError(f"student {s!r} assigned to unknown school {c!r}")
        load[c] += 1
    over = [c for c, n in load.items() if n > inst.capacities[c]]
    if over:
        raise MatchingError(f"capacity exceeded at {sorted(over)}")


def is_stable(inst: MatchingInstance, a: Mapping[str, str]) -> List[Tuple[str, str]]:
    """Every blocking (student, school) pair; empty means ``a`` is stable."""
    inst.validate()
    check_allocation(inst, a)
    rank = _priority_rank(inst)
    members: Dict[str, List[str]] = defaultdict(list)
    for s, c in a.items():
        members[c].append(s)
    blocking = []
    for s in inst.students:
        for school in inst.prefs[s]:
            if school == a[s]:
                break
            held = members[school]
            if (len(held) < inst.capacities[school]
                    or any(rank[school][t] > rank[school][s] for t in held)):
                blocking.append((s, school))
    return blocking


class Misreport(NamedTuple):
    ranking: Tuple[str, ...]
    school: str
    truthful_school: str


def find_profitable_misreport(
    mechanism: Mechanism, inst: MatchingInstance, student_id: str
) -> Optional[Misreport]:
    """Best strictly improving false report for one student, by brute force.

    Improvement is judged under the student's true preferences. Among reports
    reaching the best school, the lexicographically first is returned.
    """
    if len(inst.schools) > MAX_ENUMERATION_SCHOOLS:
        raise MatchingError(
            f"{len(inst.schools)} schools exceeds the enumeration guard of "
            f"{MAX_ENUMERATION_SCHOOLS}; use a sampling mode instead")
    truth = inst.prefs[student_id]
    true_rank = {c: i for i, c in enumerate(truth)}
    truthful_school = mechanism(inst)[student_id]
    best: Optional[Misreport] = None
    best_rank = true_rank[truthful_school]
    for report in itertools.permutations(sorted(inst.schools)):
        if report == truth:
            continue
        got = mechanism(inst.with_report(student_id, report))[student_id]
        if true_rank[got] < best_rank:
            best_rank = true_rank[got]
            best = Misreport(report, got, truthful_school)
    return best


class ManipulationRecord(NamedTuple):
    instance: str
    student: str
    truthful_school: str
    misreport_school: str


def cyclic_priorities(students: Sequence[str], schools: Sequence[str]) -> Dict[str, Tuple[str, ...]]:
    """School j ranks students starting from student j, wrapping around."""
    n = len(students)
    return {c: tuple(students[(j + i) % n] for i in range(n)) for j, c in enumerate(schools)}


def enumerate_profiles(
    students: Sequence[str], schools: Sequence[str]
) -> Iterator[Dict[str, Tuple[str, ...]]]:
    rankings = list(itertools.permutations(schools))
    for combo in itertools.product(rankings, repeat=len(students)):
        yield dict(zip(students, combo))


def exhaustive_manipulations(
    mechanism: Mechanism,
    n: int = 3,
    priorities: Optional[Mapping[str, Sequence[str]]] = None,
) -> Tuple[List[ManipulationRecord], int]:
    """Check every truthful profile of an ``n``-student, ``n``-school market.

    Capacities are one seat per school and the priority profile is fixed
    (cyclic by default). Returns the (profile, student) pairs that admit a
    profitable misreport and the total number of misreports tried.
    """
    if n > MAX_ENUMERATION_SCHOOLS:
        raise MatchingError(f"n={n} exceeds the enumeration guard of {MAX_ENUMERATION_SCHOOLS}")
    students = [f"i{k + 1}" for k in range(n)]
    schools = [f"s{k + 1}" for k in range(n)]
    prio = dict(priorities) if priorities is not None else cyclic_priorities(students, schools)
    caps = {c: 1 for c in schools}
    found: List[ManipulationRecord] = []
    tried = 0
    per_student = len(list(itertools.permutations(schools))) - 1
    for profile in enumerate_profiles(students, schools):
        inst = MatchingInstance(students, schools, profile, prio, caps)
        digest = inst.digest()
        for s in students:
            tried += per_student
            m = find_profitable_misreport(mechanism, inst, s)
            if m is not None:
                found.append(ManipulationRecord(digest, s, m.truthful_school, m.school))
    return found, tried


MANIPULATION_COLUMNS = ("instance_hash", "student", "truthful_school", "best_misreport_school")


def dumps_manipulations(records: Sequence[ManipulationRecord], mechanism: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("mechanism",) + MANIPULATION_COLUMNS)
    for r in records:
        w.writerow((mechanism,) + tuple(r))
    return buf.getvalue()


MECHANISMS: Dict[str, Mechanism] = {
    "DA": deferred_acceptance,
    "Boston": boston,
}
