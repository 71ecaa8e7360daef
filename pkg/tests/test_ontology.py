from __future__ import annotations

import random

import networkx as nx
import pytest
from hypothesis import given, settings, strategies as st

from flowaudit.ontology import (CycleDetected, DanglingSynonym, DuplicateNode, UnresolvedTerm,
                                build_ontology, bundled_data_ontology, bundled_entity_ontology,
                                load_ontology, normalize_term)


def random_dag(rng: random.Random, n: int, p: float) -> list[tuple[str, str | None]]:
    """Edges child -> parent where parents always have a lower index."""
    edges = [(f"t{i}", None) for i in range(n)]
    for i in range(1, n):
        for j in range(i):
            if rng.random() < p:
                edges.append((f"t{i}", f"t{j}"))
    return edges


def closure_oracle(edges) -> nx.DiGraph:
    g = nx.DiGraph()
    for child, parent in edges:
        g.add_node(child)
        if parent:
            g.add_edge(child, parent)
    return nx.transitive_closure_dag(g)


@pytest.mark.parametrize("seed", range(8))
def test_subsumes_matches_transitive_closure(seed):
    rng = random.Random(seed)
    edges = random_dag(rng, rng.randint(2, 60), rng.uniform(0.02, 0.2))
    ont = build_ontology("data", edges)
    tc = closure_oracle(edges)
    for a in ont.nodes:
        for d in ont.nodes:
            assert ont.subsumes(a, d) == (a == d or tc.has_edge(d, a))


def test_bundled_inventories():
    data = bundled_data_ontology()
    entity = bundled_entity_ontology()
    assert len(data) == 63 and len(data.leaves) == 21 and data.roots == {"information"}
    assert len(entity) == 64 and entity.roots == {"anyone"}


@pytest.mark.parametrize("anc,desc,expected", [
    ("pii", "email", True),
    ("personal information", "serial number", True),
    ("your information", "android id", True),
    ("email", "pii", False),
    ("information", "vr movement", True),
    ("technical information", "device id", False),
])
def test_data_subsumption(anc, desc, expected):
    assert bundled_data_ontology().subsumes(anc, desc) is expected


@pytest.mark.parametrize("anc,desc,expected", [
    ("third party", "oculus", True),
    ("platform provider", "oculus", True),
    ("anyone", "we", True),
    ("third party", "we", False),
    ("third parties", "unity", True),
    ("unaffiliated third parties", "unknown third party", True),
])
def test_entity_subsumption(anc, desc, expected):
    assert bundled_entity_ontology().subsumes(anc, desc) is expected


def test_resolve_synonyms_and_spelling():
    data = bundled_data_ontology()
    assert data.resolve("IPD").node == "vr pupillary distance"
    assert data.resolve("Hardware Info").node == "hardware information"
    assert data.resolve("Android_ID").node == "android id"
    assert data.resolve("Session Info").node == "session information"
    ref = data.resolve("favourite colour")
    assert not ref.resolved and "favourite colour" in data.unresolved
    with pytest.raises(UnresolvedTerm):
        data.ancestors("favourite colour")


def test_every_flow_data_type_resolves():
    from flowaudit.extract import load_rules
    data = bundled_data_ontology()
    leaves = {data.resolve(r.data_type).node for r in load_rules()}
    assert None not in leaves
    assert leaves == data.leaves


def test_normalize_term():
    assert normalize_term("  Third-Party  ") == "third-party"
    assert normalize_term("device_id") == "device id"
    assert normalize_term("(your) information!") == "your information"


def test_cycle_detected():
    with pytest.raises(CycleDetected) as exc:
        build_ontology("data", [("a", "b"), ("b", "c"), ("c", "a")])
    assert exc.value.path[0] == exc.value.path[-1]


def test_dangling_synonym():
    with pytest.raises(DanglingSynonym):
        build_ontology("data", [("a", "b")], [("alias", "missing")])


def test_synonym_shadowing_node_rejected():
    with pytest.raises(DuplicateNode):
        build_ontology("data", [("a", "b")], [("a", "b")])


def test_load_from_files(tmp_path):
    (tmp_path / "e.tsv").write_text("# comment\nleaf\tmid\nmid\troot\nlone\n")
    (tmp_path / "s.tsv").write_text("alias\tleaf\n")
    ont = load_ontology(tmp_path / "e.tsv", tmp_path / "s.tsv")
    assert ont.subsumes("root", "alias")
    assert ont.roots == {"root", "lone"}
    order = ont.topological_order()
    assert order.index("root") < order.index("mid") < order.index("leaf")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 40))
def test_ancestors_closed_under_parents(seed, n):
    edges = random_dag(random.Random(seed), n, 0.15)
    ont = build_ontology("data", edges)
    for node in ont.nodes:
        up = ont.ancestors(node)
        for a in up:
            assert ont.ancestors(a) <= up
