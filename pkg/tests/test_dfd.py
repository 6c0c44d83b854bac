import itertools
import random

import networkx as nx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import FIXTURES
from oracles import brute_force_cycles
from vasim.dfd import (
    ChangeAction,
    ChangelogEntry,
    ChangelogError,
    Diagram,
    DiagramError,
    DiagramFormatError,
    Edge,
    EdgeKind,
    InvalidDiagramError,
    Node,
    NodeKind,
    derive_context_diagram,
    detect_feedback_loops,
    dumps_changelog,
    dumps_diagram,
    export_dot,
    load_changelog,
    load_diagram,
    loads_changelog,
    loads_diagram,
    reconstruct_at,
    validate_diagram,
)

P, D, E = NodeKind.PROCESS, NodeKind.DATASTORE, NodeKind.EXTERNAL_ENTITY
FLOW, PART = EdgeKind.DATA_FLOW, EdgeKind.PARTICIPATION


def procs(*ids):
    return [Node(i, P, i, True) for i in ids]


def chain(ids, extra=()):
    edges = [Edge(a, b) for a, b in zip(ids, ids[1:])] + [Edge(a, b) for a, b in extra]
    return Diagram("t", procs(*ids), edges)


# -- validation ---------------------------------------------------------------


def test_empty_diagram_is_valid():
    assert validate_diagram(Diagram()) == []


def test_missing_endpoint_named():
    d = Diagram("t", procs("a"), [Edge("a", "x")])
    report = validate_diagram(d)
    assert len(report) == 1
    assert "x" in report[0].subjects and "'x'" in report[0].message


def test_participation_from_process_flagged():
    d = Diagram("t", procs("a", "b"), [Edge("a", "b", PART)])
    report = validate_diagram(d)
    assert [v.rule for v in report] == ["participation-source"]


def test_participation_must_target_process():
    d = Diagram("t", [Node("u", E), Node("db", D)], [Edge("u", "db", PART)])
    assert [v.rule for v in validate_diagram(d)] == ["participation-target"]


def test_duplicate_ids_flagged():
    d = Diagram("t", [Node("a", P), Node("a", D)], [])
    assert [v.rule for v in validate_diagram(d)] == ["duplicate-id"]


def test_entity_to_entity_flow_needs_both_outside():
    outside = Diagram("t", [Node("u", E), Node("s", E)], [Edge("u", "s")])
    assert validate_diagram(outside) == []
    inside = Diagram("t", [Node("u", E, in_vas=True), Node("s", E)], [Edge("u", "s")])
    assert [v.rule for v in validate_diagram(inside)] == ["entity-flow"]


def test_store_flow_without_process():
    d = Diagram("t", [Node("u", E), Node("db", D)], [Edge("u", "db")])
    assert [v.rule for v in validate_diagram(d)] == ["store-without-process"]


def test_multi_edges_allowed():
    d = Diagram("t", procs("a") + [Node("db", D)],
                [Edge("a", "db", annotation="x"), Edge("a", "db", annotation="y")])
    assert validate_diagram(d) == []


def test_kind_is_immutable():
    n = Node("a", P)
    with pytest.raises(AttributeError):
        n.kind = D


@pytest.mark.parametrize("name", ["school_choice.json", "ugc_platform.json", "bps_base.json"])
def test_fixtures_valid(name):
    assert validate_diagram(load_diagram(FIXTURES / name)) == []


# -- feedback loops -----------------------------------------------------------


def test_acyclic_chain_has_no_loops():
    assert detect_feedback_loops(chain(["a", "b", "c"])) == []


def test_two_cycle():
    assert detect_feedback_loops(chain(["A", "B"], [("B", "A")])) == [["A", "B"]]


def test_participation_edges_do_not_close_loops():
    d = Diagram("t", [Node("u", E), Node("p", P)], [Edge("u", "p", PART), Edge("p", "u")])
    assert detect_feedback_loops(d) == []


def test_invalid_diagram_rejected():
    with pytest.raises(InvalidDiagramError) as info:
        detect_feedback_loops(Diagram("t", procs("a"), [Edge("a", "zz")]))
    assert info.value.violations


def test_cycles_rotated_and_sorted():
    d = chain(["c", "b", "a"], [("a", "c"), ("b", "c")])
    assert detect_feedback_loops(d) == [["a", "c", "b"], ["b", "c"]]


def test_school_choice_loop(school_choice):
    cycles = detect_feedback_loops(school_choice)
    wanted = {"dataset", "1a", "1b", "1c", "2", "3"}
    assert any(wanted <= set(c) for c in cycles)
    flow_edges = [(e.src, e.dst) for e in school_choice.edges if e.kind is FLOW]
    assert cycles == brute_force_cycles(school_choice.node_ids, flow_edges)


def _random_graph(rng, n, p):
    ids = [f"n{i}" for i in range(n)]
    edges = [(a, b) for a in ids for b in ids if rng.random() < p]
    return ids, edges


def test_matches_brute_force_on_random_graphs():
    rng = random.Random(11)
    for _ in range(150):
        n = rng.randint(1, 8)
        ids, edges = _random_graph(rng, n, rng.choice([0.15, 0.3, 0.5]))
        d = Diagram("r", procs(*ids), [Edge(a, b) for a, b in edges])
        assert detect_feedback_loops(d) == brute_force_cycles(ids, edges)


def test_matches_networkx_simple_cycles():
    rng = random.Random(5)
    for _ in range(100):
        ids, edges = _random_graph(rng, rng.randint(1, 9), 0.3)
        g = nx.DiGraph()
        g.add_nodes_from(ids)
        g.add_edges_from(edges)
        expected = []
        for c in nx.simple_cycles(g):
            k = c.index(min(c))
            expected.append(c[k:] + c[:k])
        d = Diagram("r", procs(*ids), [Edge(a, b) for a, b in edges])
        assert detect_feedback_loops(d) == sorted(expected)


def test_every_cycle_uses_flow_edges(school_choice):
    flows = {(e.src, e.dst) for e in school_choice.edges if e.kind is FLOW}
    for cycle in detect_feedback_loops(school_choice):
        for i, node in enumerate(cycle):
            assert (node, cycle[(i + 1) % len(cycle)]) in flows


# -- context diagram ----------------------------------------------------------


def test_single_process_context():
    d = Diagram("t", [Node("u", E, "User"), Node("p", P, "P", True)],
                [Edge("u", "p", annotation="query"), Edge("p", "u", annotation="results")])
    c = derive_context_diagram(d, {"p"})
    assert {n.id for n in c.nodes} == {"VAS", "u"}
    assert {(e.src, e.dst) for e in c.edges} == {("u", "VAS"), ("VAS", "u")}
    assert not any(e.indirect for e in c.edges)


def test_school_choice_context(school_choice):
    c = derive_context_diagram(school_choice, {"1a", "1b", "1c"})
    assert {n.id for n in c.nodes} == {"VAS", "students", "schools", "dataset"}
    assert [n.id for n in c.nodes_of(P)] == ["VAS"]
    direct = {(e.src, e.dst) for e in c.edges if not e.indirect}
    assert ("students", "VAS") in direct and ("VAS", "students") in direct
    # Matching (2) and interaction (3) are outside the VAS: their influence is indirect.
    indirect = {(e.src, e.dst) for e in c.edges if e.indirect}
    assert ("VAS", "schools") in indirect
    assert ("schools", "students") in indirect
    assert validate_diagram(c) == []


def test_entity_inside_vas_rejected(school_choice):
    with pytest.raises(DiagramError):
        derive_context_diagram(school_choice, {"1a", "students"})


def test_empty_vas_rejected(school_choice):
    with pytest.raises(DiagramError):
        derive_context_diagram(school_choice, set())


def test_ugc_context_keeps_societal_edges():
    d = load_diagram(FIXTURES / "ugc_platform.json")
    c = derive_context_diagram(d, {"moderation", "recommender", "search", "items", "interactions"})
    assert {n.id for n in c.nodes} == {"VAS", "producers", "consumers", "society"}
    direct = {(e.src, e.dst) for e in c.edges if not e.indirect}
    indirect = {(e.src, e.dst) for e in c.edges if e.indirect}
    assert ("consumers", "society") in indirect
    assert ("consumers", "VAS") in direct
    # Consumption is eliminated, so its participation reaches the VAS indirectly too.
    assert ("consumers", "VAS") in indirect
    assert validate_diagram(c) == []


node_kinds = st.sampled_from([P, D, E])


@st.composite
def diagrams(draw):
    n = draw(st.integers(1, 6))
    ids = [f"v{i}" for i in range(n)]
    kinds = [draw(node_kinds) for _ in ids]
    in_vas = [draw(st.booleans()) and k is not E for k in kinds]
    nodes = [Node(i, k, i, v) for i, k, v in zip(ids, kinds, in_vas)]
    edges = []
    for a in range(n):
        for b in range(n):
            if draw(st.integers(0, 3)) == 0:
                kind = PART if kinds[a] is E and kinds[b] is P and draw(st.booleans()) else FLOW
                if kind is FLOW and kinds[a] is E and kinds[b] is E and (in_vas[a] or in_vas[b]):
                    continue
                edges.append(Edge(ids[a], ids[b], kind, draw(st.sampled_from([None, "x", "y"]))))
    d = Diagram("h", nodes, edges)
    if validate_diagram(d):
        d = Diagram("h", nodes + [Node("pp", P, "pp", True)], edges)
    return d


@settings(max_examples=200, deadline=None)
@given(diagrams(), st.data())
def test_context_closure(d, data):
    candidates = sorted(n.id for n in d.nodes if n.kind is not E)
    if not candidates:
        return
    vas = data.draw(st.sets(st.sampled_from(candidates), min_size=1))
    c = derive_context_diagram(d, vas)
    assert validate_diagram(c) == []
    assert {n.id for n in c.nodes_of(E)} == {n.id for n in d.nodes_of(E)}


# -- DOT ----------------------------------------------------------------------


def test_dot_empty():
    text = export_dot(Diagram())
    assert text.startswith("digraph")
    assert "->" not in text and "[" not in text


def test_dot_single_process():
    text = export_dot(Diagram("t", procs("P")))
    assert '"P" [label="P", shape=circle' in text


def test_dot_shapes_and_styles(school_choice):
    text = export_dot(school_choice)
    assert "shape=tab" in text and "shape=box" in text
    assert '"students" -> "3" [style=dashed' in text
    assert export_dot(school_choice) == text


def test_dot_node_order_independent(school_choice):
    shuffled = Diagram(school_choice.title, reversed(school_choice.nodes), reversed(school_choice.edges))
    assert export_dot(shuffled) == export_dot(school_choice)


def test_dot_escapes_quotes():
    text = export_dot(Diagram('say "hi"', [Node('a"b', P, "x\\y")]))
    assert '"a\\"b"' in text and 'say \\"hi\\"' in text and '"x\\\\y"' in text


def _small_diagrams():
    ids = ["a", "b", "c"]
    options = []
    for kinds in itertools.product([P, D], repeat=2):
        for in_vas in itertools.product([True, False], repeat=2):
            nodes = [Node(i, k, i, v) for i, k, v in zip(ids, kinds, in_vas)] + [Node("c", E, "c")]
            for mask in range(16):
                pairs = [("a", "b"), ("b", "a"), ("a", "c"), ("c", "a")]
                edges = [Edge(s, t) for bit, (s, t) in enumerate(pairs) if mask >> bit & 1]
                d = Diagram("t", nodes, edges)
                if not validate_diagram(d):
                    options.append(d)
    return options


def test_dot_injective_on_small_diagrams():
    seen = {}
    for d in _small_diagrams():
        key = (frozenset(d.nodes), frozenset(d.edges))
        text = export_dot(d)
        if text in seen:
            assert seen[text] == key
        seen[text] = key
    assert len(seen) == len({(frozenset(d.nodes), frozenset(d.edges)) for d in _small_diagrams()})


@settings(max_examples=200, deadline=None)
@given(diagrams(), diagrams())
def test_dot_distinguishes_random_pairs(d1, d2):
    same = (set(d1.nodes), set(d1.edges)) == (set(d2.nodes), set(d2.edges))
    assert (export_dot(d1) == export_dot(d2)) == same


# -- changelog ----------------------------------------------------------------


@pytest.fixture
def bps():
    return load_changelog(FIXTURES / "bps_changelog.jsonl"), load_diagram(FIXTURES / "bps_base.json")


def _processes(d):
    return {n.id for n in d.nodes_of(P)}


def test_bps_2000_has_mechanism_only(bps):
    log, base = bps
    d = reconstruct_at(log, base, 2000)
    assert _processes(d) == {"2"}
    assert d.node("2").algorithm == "Boston"


def test_bps_2010_has_both(bps):
    log, base = bps
    d = reconstruct_at(log, base, 2010)
    assert _processes(d) == {"1", "2"}
    assert d.node("2").algorithm == "Deferred Acceptance"
    assert validate_diagram(d) == []


def test_before_first_entry_is_base(bps):
    log, base = bps
    assert reconstruct_at(log, base, 1900) == base


def test_retire_nonexistent_names_entry():
    log = [ChangelogEntry(2001, ChangeAction.RETIRE_PROCESS, "drop old portal", "ghost")]
    with pytest.raises(ChangelogError, match="ghost"):
        reconstruct_at(log, Diagram(), 2020)


def test_retire_removes_incident_edges():
    base = Diagram("t", [Node("u", E)], [])
    log = [
        ChangelogEntry(2000, ChangeAction.ADD_PROCESS, "add", "p", edges=[Edge("u", "p")]),
        ChangelogEntry(2005, ChangeAction.RETIRE_PROCESS, "drop", "p"),
    ]
    assert len(reconstruct_at(log, base, 2003).edges) == 1
    later = reconstruct_at(log, base, 2005)
    assert later.edges == () and _processes(later) == set()


def test_same_year_keeps_insertion_order():
    log = [
        ChangelogEntry(2000, ChangeAction.ADD_PROCESS, "add", "p"),
        ChangelogEntry(2000, ChangeAction.RETIRE_PROCESS, "drop", "p"),
    ]
    assert _processes(reconstruct_at(log, Diagram(), 2000)) == set()


def test_notes_are_inert(bps):
    log, base = bps
    no_notes = [e for e in log if e.action is not ChangeAction.NOTE]
    for year in (1990, 2001, 2020):
        assert reconstruct_at(log, base, year) == reconstruct_at(no_notes, base, year)


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(st.integers(2000, 2010), st.sampled_from(["add", "retire"]),
                          st.sampled_from(["p", "q", "r"])), max_size=10),
       st.integers(1999, 2011), st.integers(0, 3))
def test_reconstruct_matches_replay(ops, year, later):
    # Keep only consistent histories (no double add, no phantom retire).
    alive, log = set(), []
    for y, op, pid in sorted(ops, key=lambda t: t[0]):
        if op == "add" and pid not in alive:
            alive.add(pid)
            log.append(ChangelogEntry(y, ChangeAction.ADD_PROCESS, "a", pid))
        elif op == "retire" and pid in alive:
            alive.discard(pid)
            log.append(ChangelogEntry(y, ChangeAction.RETIRE_PROCESS, "r", pid))
    base = Diagram("b", [Node("u", E)], [])

    def replay(cutoff):
        present = set()
        for e in log:
            if e.year <= cutoff:
                (present.add if e.action is ChangeAction.ADD_PROCESS else present.discard)(e.process_id)
        return present

    now = reconstruct_at(log, base, year)
    assert _processes(now) == replay(year)
    # Entries dated after Y never leak into the year-Y diagram.
    truncated = [e for e in log if e.year <= year]
    assert reconstruct_at(truncated, base, year + later) == now


# -- file formats -------------------------------------------------------------


def test_diagram_round_trip(school_choice):
    again = loads_diagram(dumps_diagram(school_choice))
    assert again == school_choice


def test_changelog_round_trip(bps):
    log, _ = bps
    assert loads_changelog(dumps_changelog(log)) == log


def test_unknown_diagram_key_rejected():
    with pytest.raises(DiagramFormatError, match="unknown"):
        loads_diagram('{"title": "t", "nodes": [], "edges": [], "layout": 1}')


def test_unknown_node_key_rejected():
    with pytest.raises(DiagramFormatError, match="colour"):
        loads_diagram('{"nodes": [{"id": "a", "kind": "Process", "colour": "red"}], "edges": []}')


def test_malformed_json_reports_position():
    with pytest.raises(DiagramFormatError) as info:
        loads_diagram('{\n  "nodes": [,]\n}')
    assert info.value.line == 2 and info.value.column is not None


def test_changelog_bad_line_number():
    with pytest.raises(DiagramFormatError) as info:
        loads_changelog('{"year": 1, "action": "Note", "description": "x"}\n{oops}\n')
    assert info.value.line == 2


def test_changelog_unknown_action():
    with pytest.raises(DiagramFormatError):
        loads_changelog('{"year": 1, "action": "Explode", "description": "x"}')
