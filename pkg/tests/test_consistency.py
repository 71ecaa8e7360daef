from __future__ import annotations

import random

import pytest
from hypothesis import given, settings, strategies as st

from flowaudit.consistency import (AMBIGUOUS, CLASSES, CLEAR, INCORRECT, OMITTED, VAGUE,
                                   CollectionStatement, DisclosureVerdict, FlowKey, PolicyChecker,
                                   UnknownReferencedEntity, classify, library_from_statements,
                                   load_statements, merge_policies, resolve_first_party, summarize)
from flowaudit.destination import AppMeta
from flowaudit.ontology import UnresolvedTerm, bundled_data_ontology, bundled_entity_ontology

DATA = bundled_data_ontology()
ENTITY = bundled_entity_ontology()


def s(entity, data_type, action="collect", app="app", sid="", policy="app"):
    return CollectionStatement(app, entity, action, data_type, sid, "", policy)


@pytest.mark.parametrize("flow,stmts,expected", [
    (("usage time", "we"), [s("we", "timestamp")], CLEAR),
    (("serial number", "oculus"), [s("third parties", "your information")], VAGUE),
    (("system version", "oculus"), [], OMITTED),
    (("serial number", "oculus"), [s("third party", "pii"), s("third parties", "pii", "not_collect")], AMBIGUOUS),
    (("device id", "unity"), [s("unaffiliated third parties", "personal information", "not_collect")], INCORRECT),
    (("email", "oculus"), [s("we", "email")], OMITTED),           # entity does not subsume
    (("email", "oculus"), [s("oculus", "location information")], OMITTED),
])
def test_classify(flow, stmts, expected):
    v = classify(FlowKey(*flow), stmts, DATA, ENTITY)
    assert v.disclosure == expected
    assert v.consistent == (expected in (CLEAR, VAGUE))


def test_statements_with_unknown_terms_are_ignored():
    v = classify(FlowKey("email", "we"), [s("we", "shoe size")], DATA, ENTITY)
    assert v.disclosure == OMITTED


def test_unresolved_flow_term_raises():
    with pytest.raises(UnresolvedTerm):
        classify(FlowKey("shoe size", "we"), [], DATA, ENTITY)


def test_conflicting_sentences_reported():
    stmts = [s("third party", "pii", sid="7"), s("third party", "email", "not_collect", sid="7")]
    v = classify(FlowKey("email", "oculus"), stmts, DATA, ENTITY)
    assert v.disclosure == AMBIGUOUS and v.conflicting_sentences == ["7"]


def test_verdict_json_roundtrip():
    v = classify(FlowKey("email", "oculus", "app", "h", "Platform", "PII"),
                 [s("third party", "pii", sid="1")], DATA, ENTITY)
    again = DisclosureVerdict.from_json(v.to_json())
    assert again == v


def test_merge_rewrites_first_person_and_warns():
    lib = library_from_statements([s("we", "system version", app="Oculus", policy="Oculus"),
                                   s("advertisers", "email", app="Oculus", policy="Oculus")])
    meta = AppMeta("game", referenced_policies=["oculus"])
    with pytest.warns(UnknownReferencedEntity):
        merged = merge_policies([], meta, lib, auto_include=["unity"])
    assert [(m.entity, m.app_id, m.source_policy) for m in merged] == [
        ("oculus", "game", "oculus"), ("advertisers", "game", "oculus")]


def test_first_party_aliases():
    meta = AppMeta("com.x", first_party_aliases=["Skydance"])
    assert resolve_first_party(s("Skydance", "email"), meta).entity == "we"
    assert resolve_first_party(s("us", "email"), meta).entity == "we"
    assert resolve_first_party(s("oculus", "email"), meta).entity == "oculus"


def test_checker_auto_include_turns_omitted_clear():
    lib = library_from_statements([s("we", "system version", app="oculus", policy="oculus")])
    flow = FlowKey("system version", "oculus", "game")
    assert PolicyChecker(DATA, ENTITY, []).check(flow).disclosure == OMITTED
    checker = PolicyChecker(DATA, ENTITY, [], {}, lib, ("oculus",))
    assert checker.check(flow).disclosure == CLEAR


def test_load_statements(tmp_path):
    p = tmp_path / "s.jsonl"
    p.write_text('{"app": "a", "entity": "we", "action": "collect", "data_type": "email", "sentence": "x"}\n\n')
    (st_,) = load_statements(p)
    assert st_.source_policy == "a" and st_.sentence_text == "x"
    with pytest.raises(ValueError):
        CollectionStatement("a", "we", "share", "email")


def test_summarize():
    vs = [DisclosureVerdict(FlowKey("email", "we", category="PII"), c) for c in (CLEAR, OMITTED, OMITTED)]
    t = summarize(vs)
    assert t.histogram() == {CLEAR: 1, VAGUE: 0, OMITTED: 2, AMBIGUOUS: 0, INCORRECT: 0}
    assert (t.consistent, t.inconsistent) == (1, 2)
    assert t.by_category == {"PII": {CLEAR: 1, OMITTED: 2}}


DATA_TERMS = sorted(DATA.nodes)
ENTITY_TERMS = sorted(ENTITY.nodes)
LEAVES = sorted(DATA.leaves)


def random_instance(rng: random.Random):
    flows = [FlowKey(rng.choice(LEAVES), rng.choice(ENTITY_TERMS)) for _ in range(rng.randint(1, 8))]
    stmts = [s(rng.choice(ENTITY_TERMS), rng.choice(DATA_TERMS), rng.choice(["collect", "not_collect"]))
             for _ in range(rng.randint(0, 8))]
    extra = [s(rng.choice(ENTITY_TERMS), rng.choice(DATA_TERMS)) for _ in range(rng.randint(1, 8))]
    return flows, stmts, extra


def consistent_count(flows, stmts) -> int:
    return sum(classify(f, stmts, DATA, ENTITY).consistent for f in flows)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32))
def test_adding_collect_statements_is_monotone(seed):
    flows, stmts, extra = random_instance(random.Random(seed))
    assert consistent_count(flows, stmts + extra) >= consistent_count(flows, stmts)


def test_every_class_reachable():
    seen = {classify(FlowKey(*f), st_, DATA, ENTITY).disclosure for f, st_ in [
        (("email", "we"), [s("we", "email")]),
        (("email", "we"), [s("we", "pii")]),
        (("email", "we"), []),
        (("email", "we"), [s("we", "pii"), s("we", "email", "not_collect")]),
        (("email", "we"), [s("we", "email", "not_collect")]),
    ]}
    assert seen == set(CLASSES)
