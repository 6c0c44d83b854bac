"""Sociotechnical data-flow diagrams.

Diagrams are immutable values: processes (circles), datastores (open-ended
rectangles) and external entities (stakeholders), joined by data-flow edges
and dotted participation edges from an entity into a process it takes part in.
"""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

VAS_NODE_ID = "VAS"


class NodeKind(str, Enum):
    PROCESS = "Process"
    DATASTORE = "Datastore"
    EXTERNAL_ENTITY = "ExternalEntity"


class EdgeKind(str, Enum):
    DATA_FLOW = "DataFlow"
    PARTICIPATION = "Participation"


class ChangeAction(str, Enum):
    ADD_PROCESS = "AddProcess"
    RETIRE_PROCESS = "RetireProcess"
    SWAP_ALGORITHM = "SwapAlgorithm"
    NOTE = "Note"


class DiagramError(ValueError):
    pass


class InvalidDiagramError(DiagramError):
    """Raised by operations that require a valid diagram."""

    def __init__(self, violations: Sequence["Violation"]):
        self.violations = list(violations)
        lines = "; ".join(v.message for v in self.violations)
        super().__init__(f"invalid diagram: {lines}")


class DiagramFormatError(DiagramError):
    """Malformed diagram or changelog file. Carries line/column when known."""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", column {column})" if column is not None else ")")
        super().__init__(message + where)


class ChangelogError(DiagramError):
    pass


@dataclass(frozen=True)
class Node:
    id: str
    kind: NodeKind
    label: str = ""
    in_vas: bool = False
    algorithm: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", NodeKind(self.kind))


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    kind: EdgeKind = EdgeKind.DATA_FLOW
    annotation: Optional[str] = None
    # Set on derived context diagrams for influence that bypasses the VAS.
    indirect: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", EdgeKind(self.kind))
        if self.annotation == "":
            object.__setattr__(self, "annotation", None)


@dataclass(frozen=True)
class Diagram:
    title: str = ""
    nodes: Tuple[Node, ...] = ()
    edges: Tuple[Edge, ...] = ()
    comment: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))

    @property
    def node_ids(self) -> Set[str]:
        return {n.id for n in self.nodes}

    def node(self, node_id: str) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def nodes_of(self, kind: NodeKind) -> List[Node]:
        return [n for n in self.nodes if n.kind is kind]


@dataclass(frozen=True)
class Violation:
    rule: str
    subjects: Tuple[str, ...]
    message: str


@dataclass(frozen=True)
class ChangelogEntry:
    year: int
    action: ChangeAction
    description: str
    process_id: Optional[str] = None
    reference: str = ""
    # Only meaningful for AddProcess / SwapAlgorithm.
    label: Optional[str] = None
    in_vas: bool = False
    algorithm: Optional[str] = None
    edges: Tuple[Edge, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "action", ChangeAction(self.action))
        object.__setattr__(self, "edges", tuple(self.edges))


# ---------------------------------------------------------------------------
# validation


def validate_diagram(d: Diagram) -> List[Violation]:
    """Return every structural violation in ``d``; an empty list means valid."""
    out: List[Violation] = []
    kinds: Dict[str, Node] = {}
    seen: Set[str] = set()
    for n in d.nodes:
        if not n.id:
            out.append(Violation("empty-id", (n.id,), "node with empty id"))
        if n.id in seen:
            out.append(Violation("duplicate-id", (n.id,), f"duplicate node id {n.id!r}"))
        seen.add(n.id)
        kinds.setdefault(n.id, n)

    touches_store = False
    for e in d.edges:
        missing = [x for x in (e.src, e.dst) if x not in kinds]
        for x in missing:
            out.append(Violation(
                "dangling-edge", (e.src, e.dst, x),
                f"edge {e.src}->{e.dst} references missing node {x!r}",
            ))
        if missing:
            continue
        src, dst = kinds[e.src], kinds[e.dst]
        if e.kind is EdgeKind.PARTICIPATION:
            if src.kind is not NodeKind.EXTERNAL_ENTITY:
                out.append(Violation(
                    "participation-source", (e.src, e.dst),
                    f"participation edge {e.src}->{e.dst} must start at an external entity, "
                    f"not a {src.kind.value}",
                ))
            if dst.kind is not NodeKind.PROCESS:
                out.append(Violation(
                    "participation-target", (e.src, e.dst),
                    f"participation edge {e.src}->{e.dst} must end at a process, "
                    f"not a {dst.kind.value}",
                ))
        else:
            if (src.kind is NodeKind.EXTERNAL_ENTITY and dst.kind is NodeKind.EXTERNAL_ENTITY
                    and (src.in_vas or dst.in_vas)):
                out.append(Violation(
                    "entity-flow", (e.src, e.dst),
                    f"data flow {e.src}->{e.dst} links two external entities "
                    "and one of them is marked inside the VAS",
                ))
            if NodeKind.DATASTORE in (src.kind, dst.kind):
                touches_store = True

    if touches_store and not d.nodes_of(NodeKind.PROCESS):
        out.append(Violation(
            "store-without-process", (),
            "datastore flows exist but the diagram has no process",
        ))
    return out


def _require_valid(d: Diagram) -> None:
    report = validate_diagram(d)
    if report:
        raise InvalidDiagramError(report)


# ---------------------------------------------------------------------------
# feedback loops


def _flow_successors(d: Diagram) -> Dict[str, List[str]]:
    succ: Dict[str, Set[str]] = defaultdict(set)
    for e in d.edges:
        if e.kind is EdgeKind.DATA_FLOW:
            succ[e.src].add(e.dst)
    return {k: sorted(v) for k, v in succ.items()}


def detect_feedback_loops(d: Diagram) -> List[List[str]]:
    """Every elementary cycle over data-flow edges.

    Each cycle is rotated so its smallest id leads; the list is sorted
    lexicographically. Participation edges never close a loop.
    """
    _require_valid(d)
    succ = _flow_successors(d)
    order = sorted(d.node_ids)
    rank = {n: i for i, n in enumerate(order)}
    cycles: List[List[str]] = []

    for start in order:
        # Only visit nodes ranked above ``start`` so each cycle is found once,
        # from its smallest member.
        path = [start]
        on_path = {start}
        stack = [iter(succ.get(start, ()))]
        while stack:
            nxt = next(stack[-1], None)
            if nxt is None:
                stack.pop()
                on_path.discard(path.pop())
                continue
            if nxt == start:
                cycles.append(list(path))
            elif nxt not in on_path and rank[nxt] > rank[start]:
                path.append(nxt)
                on_path.add(nxt)
                stack.append(iter(succ.get(nxt, ())))
    cycles.sort()
    return cycles


# ---------------------------------------------------------------------------
# level-0 context diagram


def derive_context_diagram(d: Diagram, vas_node_ids: Iterable[str]) -> Diagram:
    """Collapse ``vas_node_ids`` into a single ``VAS`` process.

    Retained: the VAS node, every external entity, and datastores outside the
    VAS. Processes outside the VAS are eliminated; each path through them
    between retained nodes becomes one edge flagged ``indirect``, as do edges
    that never touch the VAS.
    """
    vas = set(vas_node_ids)
    if not vas:
        raise DiagramError("vas_node_ids must be nonempty")
    unknown = vas - d.node_ids
    if unknown:
        raise DiagramError(f"unknown VAS node ids: {sorted(unknown)}")
    entities = sorted(n.id for n in d.nodes_of(NodeKind.EXTERNAL_ENTITY) if n.id in vas)
    if entities:
        raise DiagramError(f"external entities cannot be inside the VAS: {entities}")
    _require_valid(d)

    def mapped(node_id: str) -> Optional[str]:
        if node_id in vas:
            return VAS_NODE_ID
        if d.node(node_id).kind is NodeKind.PROCESS:
            return None
        return node_id

    out_edges: Dict[str, List[Edge]] = defaultdict(list)
    for e in d.edges:
        out_edges[e.src].append(e)

    derived: List[Edge] = []

    def emit(edge: Edge) -> None:
        if edge.src != edge.dst and edge not in derived:
            derived.append(edge)

    for e in d.edges:
        src = mapped(e.src)
        if src is None:
            continue
        dst = mapped(e.dst)
        if dst is not None:
            emit(Edge(src, dst, e.kind, e.annotation,
                      indirect=VAS_NODE_ID not in (src, dst)))
            continue
        # Walk forward through eliminated processes until retained nodes.
        seen = {e.dst}
        frontier = [e.dst]
        while frontier:
            cur = frontier.pop()
            for nxt in out_edges.get(cur, ()):
                if nxt.kind is not EdgeKind.DATA_FLOW:
                    continue
                target = mapped(nxt.dst)
                if target is not None:
                    emit(Edge(src, target, EdgeKind.DATA_FLOW, None, indirect=True))
                elif nxt.dst not in seen:
                    seen.add(nxt.dst)
                    frontier.append(nxt.dst)

    nodes: List[Node] = [Node(VAS_NODE_ID, NodeKind.PROCESS, "VAS", in_vas=True)]
    for n in d.nodes:
        if n.kind is NodeKind.EXTERNAL_ENTITY:
            nodes.append(replace(n, in_vas=False))
        elif n.kind is NodeKind.DATASTORE and n.id not in vas:
            nodes.append(n)
    title = f"{d.title} (level 0)" if d.title else "level 0"
    return Diagram(title, nodes, derived, d.comment)


# ---------------------------------------------------------------------------
# DOT export

_SHAPES = {
    NodeKind.PROCESS: "circle",
    NodeKind.DATASTORE: "tab",
    NodeKind.EXTERNAL_ENTITY: "box",
}
_OUTSIDE_COLOR = "forestgreen"


def _q(text: str) -> str:
    escaped = text.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")
    return f'"{escaped}"'


def export_dot(d: Diagram) -> str:
    """Render ``d`` as a Graphviz digraph, byte-identical for equal diagrams."""
    _require_valid(d)
    lines = [f"digraph {_q(d.title)} {{"]
    for n in sorted(set(d.nodes), key=lambda n: n.id):
        attrs = [f"label={_q(n.label)}", f"shape={_SHAPES[n.kind]}"]
        color = "black" if n.in_vas else _OUTSIDE_COLOR
        attrs.append(f"color={color}")
        attrs.append(f"fontcolor={color}")
        if n.algorithm is not None:
            attrs.append(f"tooltip={_q(n.algorithm)}")
        lines.append(f"  {_q(n.id)} [{', '.join(attrs)}];")

    def edge_key(e: Edge):
        return (e.src, e.dst, e.kind.value, e.annotation is not None, e.annotation or "", e.indirect)

    for e in sorted(set(d.edges), key=edge_key):
        attrs = []
        if e.annotation is not None:
            attrs.append(f"label={_q(e.annotation)}")
        attrs.append("style=dashed" if e.kind is EdgeKind.PARTICIPATION else "style=solid")
        if e.indirect:
            attrs.append(f"color={_OUTSIDE_COLOR}")
        lines.append(f"  {_q(e.src)} -> {_q(e.dst)} [{', '.join(attrs)}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# changelog


def reconstruct_at(log: Sequence[ChangelogEntry], base: Diagram, year: int) -> Diagram:
    """Apply every structural entry dated ``<= year`` to ``base``, oldest first.

    Entries sharing a year keep their insertion order.
    """
    nodes: Dict[str, Node] = {n.id: n for n in base.nodes}
    edges: List[Edge] = list(base.edges)
    for entry in sorted(log, key=lambda e: e.year):
        if entry.year > year:
            break
        pid = entry.process_id
        if entry.action is ChangeAction.NOTE:
            continue
        if pid is None:
            raise ChangelogError(f"{entry.action.value} entry ({entry.year}) has no process_id")
        if entry.action is ChangeAction.ADD_PROCESS:
            if pid in nodes:
                raise ChangelogError(f"entry {entry.year} adds existing process {pid!r}")
            nodes[pid] = Node(pid, NodeKind.PROCESS, entry.label or pid,
                              entry.in_vas, entry.algorithm)
            for e in entry.edges:
                missing = [x for x in (e.src, e.dst) if x not in nodes]
                if missing:
                    raise ChangelogError(
                        f"entry {entry.year} ({pid}) connects to missing nodes {missing}")
                edges.append(e)
        elif entry.action is ChangeAction.RETIRE_PROCESS:
            if pid not in nodes:
                raise ChangelogError(
                    f"entry {entry.year} retires nonexistent process {pid!r}: {entry.description}")
            del nodes[pid]
            edges = [e for e in edges if pid not in (e.src, e.dst)]
        elif entry.action is ChangeAction.SWAP_ALGORITHM:
            if pid not in nodes:
                raise ChangelogError(
                    f"entry {entry.year} swaps algorithm of nonexistent process {pid!r}")
            nodes[pid] = replace(nodes[pid], algorithm=entry.algorithm)
    return Diagram(base.title, nodes.values(), edges, base.comment)


# ---------------------------------------------------------------------------
# file formats

_DIAGRAM_KEYS = {"title", "nodes", "edges", "comment"}
_NODE_KEYS = {"id", "kind", "label", "in_vas", "algorithm"}
_EDGE_KEYS = {"src", "dst", "kind", "annotation", "indirect"}
_ENTRY_KEYS = {"year", "action", "process_id", "description", "reference",
               "label", "in_vas", "algorithm", "edges"}


def _check_keys(obj, allowed: Set[str], required: Set[str], what: str, line=None) -> None:
    if not isinstance(obj, dict):
        raise DiagramFormatError(f"{what} must be a JSON object", line)
    extra = set(obj) - allowed
    if extra:
        raise DiagramFormatError(f"unknown {what} keys: {sorted(extra)}", line)
    missing = required - set(obj)
    if missing:
        raise DiagramFormatError(f"{what} missing keys: {sorted(missing)}", line)


def _edge_from_dict(obj, line=None) -> Edge:
    _check_keys(obj, _EDGE_KEYS, {"src", "dst", "kind"}, "edge", line)
    try:
        return Edge(obj["src"], obj["dst"], EdgeKind(obj["kind"]),
                    obj.get("annotation"), bool(obj.get("indirect", False)))
    except ValueError as exc:
        raise DiagramFormatError(str(exc), line) from None


def _edge_to_dict(e: Edge) -> dict:
    out = {"src": e.src, "dst": e.dst, "kind": e.kind.value, "annotation": e.annotation}
    if e.indirect:
        out["indirect"] = True
    return out


def diagram_from_dict(obj) -> Diagram:
    _check_keys(obj, _DIAGRAM_KEYS, {"nodes", "edges"}, "diagram")
    nodes = []
    for raw in obj["nodes"]:
        _check_keys(raw, _NODE_KEYS, {"id", "kind"}, "node")
        try:
            kind = NodeKind(raw["kind"])
        except ValueError as exc:
            raise DiagramFormatError(str(exc)) from None
        nodes.append(Node(raw["id"], kind, raw.get("label", raw["id"]),
                          bool(raw.get("in_vas", False)), raw.get("algorithm")))
    edges = [_edge_from_dict(raw) for raw in obj["edges"]]
    return Diagram(obj.get("title", ""), nodes, edges, obj.get("comment"))


def diagram_to_dict(d: Diagram) -> dict:
    out: dict = {"title": d.title}
    if d.comment is not None:
        out["comment"] = d.comment
    nodes = []
    for n in d.nodes:
        raw = {"id": n.id, "kind": n.kind.value, "label": n.label, "in_vas": n.in_vas}
        if n.algorithm is not None:
            raw["algorithm"] = n.algorithm
        nodes.append(raw)
    out["nodes"] = nodes
    out["edges"] = [_edge_to_dict(e) for e in d.edges]
    return out


def loads_diagram(text: str) -> Diagram:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DiagramFormatError(exc.msg, exc.lineno, exc.colno) from None
    return diagram_from_dict(obj)


def load_diagram(path: Union[str, Path]) -> Diagram:
    return loads_diagram(Path(path).read_text(encoding="utf-8"))


def dumps_diagram(d: Diagram) -> str:
    return json.dumps(diagram_to_dict(d), indent=2, ensure_ascii=False) + "\n"


def entry_from_dict(obj, line=None) -> ChangelogEntry:
    _check_keys(obj, _ENTRY_KEYS, {"year", "action", "description"}, "changelog entry", line)
    try:
        action = ChangeAction(obj["action"])
    except ValueError as exc:
        raise DiagramFormatError(str(exc), line) from None
    if not isinstance(obj["year"], int):
        raise DiagramFormatError("year must be an integer", line)
    return ChangelogEntry(
        year=obj["year"],
        action=action,
        description=obj["description"],
        process_id=obj.get("process_id"),
        reference=obj.get("reference", ""),
        label=obj.get("label"),
        in_vas=bool(obj.get("in_vas", False)),
        algorithm=obj.get("algorithm"),
        edges=[_edge_from_dict(e, line) for e in obj.get("edges", ())],
    )


def loads_changelog(text: str) -> List[ChangelogEntry]:
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise DiagramFormatError(exc.msg, lineno, exc.colno) from None
        entries.append(entry_from_dict(obj, lineno))
    return entries


def load_changelog(path: Union[str, Path]) -> List[ChangelogEntry]:
    return loads_changelog(Path(path).read_text(encoding="utf-8"))


def dumps_changelog(log: Sequence[ChangelogEntry]) -> str:
    lines = []
    for e in log:
        obj = {"year": e.year, "action": e.action.value, "process_id": e.process_id,
               "description": e.description, "reference": e.reference}
        if e.label is not None:
            obj["label"] = e.label
        if e.in_vas:
            obj["in_vas"] = True
        if e.algorithm is not None:
            obj["algorithm"] = e.algorithm
        if e.edges:
            obj["edges"] = [_edge_to_dict(x) for x in e.edges]
        lines.append(json.dumps(obj, ensure_ascii=False))
    return "\n".join(lines) + ("\n" if lines else "")
