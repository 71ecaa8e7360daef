from __future__ import annotations

import pytest
from hypothesis import given, settings, strategies as st

from flowaudit.consistency import CollectionStatement, DisclosureVerdict, FlowKey, NotConsistent
from flowaudit.purpose import (CORE, CORE_PURPOSES, PURPOSES, UNRELATED, UNRELATED_PURPOSES,
                               UNSPECIFIC, AnnotatedSegment, PurposedFlow, annotate_flow,
                               attach_purposes, bag_of_words, contains_either_way,
                               expand_and_categorize, functional_class, match_segment,
                               normalize_label, split_sentences)


def stmt(sentence, policy="app"):
    return CollectionStatement("app", "we", "collect", "email", "s", sentence, policy)


def verdict(disclosure="clear", stmts=()):
    return DisclosureVerdict(FlowKey("email", "we", "app", "h.com", "First", "PII"), disclosure,
                             list(stmts))


def test_partition_is_exact():
    assert len(PURPOSES) == 9
    assert CORE_PURPOSES.isdisjoint(UNRELATED_PURPOSES)
    assert CORE_PURPOSES | UNRELATED_PURPOSES == PURPOSES
    assert [functional_class(p) for p in sorted(CORE_PURPOSES)] == [CORE] * 5
    assert [functional_class(p) for p in sorted(UNRELATED_PURPOSES)] == [UNRELATED] * 4


@pytest.mark.parametrize("raw,norm", [
    ("Personalization/Customization", "personalization customization"),
    ("Analytics/Research", "analytics research"),
    ("merger-acquisition", "merger acquisition"),
    ("Unspecific", UNSPECIFIC),
])
def test_normalize_label(raw, norm):
    assert normalize_label(raw) == norm


def test_unknown_label_rejected():
    with pytest.raises(ValueError):
        normalize_label("world domination")


def test_bag_of_words():
    assert bag_of_words("We collect your E-mail, a.") == {"we", "collect", "your", "mail"}


def test_split_sentences_keeps_versions():
    assert split_sentences("Version 2.1 is used. Next one!") == ["Version 2.1 is used", "Next one"]


def test_containment_either_way():
    a = bag_of_words("we collect email")
    b = bag_of_words("we collect email address for login")
    assert contains_either_way(a, b) and contains_either_way(b, a)
    assert not contains_either_way(a, bag_of_words("we share email"))
    assert not contains_either_way(frozenset(), b)


def test_segment_matches_sentence_inside_longer_text():
    seg = AnnotatedSegment("app", "1", "Intro text. We collect your email address. Outro.",
                           frozenset({"marketing"}))
    assert seg.matches("we collect your email address")
    assert seg.matches("We collect your email address to send newsletters")  # superset of one sentence
    assert not seg.matches("We sell location data")


def test_empty_purposes_mean_unspecific():
    assert AnnotatedSegment("a", "1", "x y").purposes == {UNSPECIFIC}


def test_first_match_in_document_order():
    segs = [AnnotatedSegment("p", "1", "alpha beta", frozenset({"marketing"})),
            AnnotatedSegment("p", "2", "alpha beta gamma", frozenset({"advertising"}))]
    assert match_segment("alpha beta", segs).segment_id == "1"
    assert match_segment("delta", segs) is None


def test_annotate_union_vs_first_only():
    segs = [AnnotatedSegment("app", "1", "we collect email", frozenset({"marketing"})),
            AnnotatedSegment("app", "2", "we collect email for login", frozenset({"basic service feature"})),
            AnnotatedSegment("other", "3", "we collect email", frozenset({"advertising"}))]
    v = verdict(stmts=[stmt("we collect email")])
    labels, prov = annotate_flow(v, segs)
    assert labels == {"marketing", "basic service feature"} and prov == ["1", "2"]
    labels, prov = annotate_flow(v, segs, first_match_only=True)
    assert labels == {"marketing"} and prov == ["1"]


def test_annotate_falls_back_to_unspecific():
    v = verdict(stmts=[stmt("nothing in common")])
    assert annotate_flow(v, [AnnotatedSegment("app", "1", "we collect email", frozenset({"marketing"}))]) \
        == ({UNSPECIFIC}, [])


def test_annotate_rejects_inconsistent():
    with pytest.raises(NotConsistent):
        annotate_flow(verdict("omitted"), [])


def test_expand_one_record_per_purpose():
    v = verdict(stmts=[stmt("x")])
    records, tallies = expand_and_categorize([(v, {"marketing", "legal requirement"}, ["s1"]),
                                              (v, {UNSPECIFIC}, [])])
    assert sorted(r.purpose for r in records) == ["legal requirement", "marketing"]
    assert tallies.core == 1 and tallies.unrelated == 1 and tallies.unspecific == 1
    assert tallies.by_party == {"First": 2}


def test_purposed_flow_json_roundtrip():
    r = PurposedFlow("a", "Email", "h", "we", "First", "marketing", UNRELATED, ("s1",))
    assert PurposedFlow.from_json(r.to_json()) == r


def test_attach_skips_inconsistent():
    seg = AnnotatedSegment("app", "1", "we collect email", frozenset({"marketing"}))
    records, _ = attach_purposes([verdict("vague", [stmt("we collect email")]), verdict("incorrect")], [seg])
    assert len(records) == 1


labels = st.sets(st.sampled_from(sorted(PURPOSES | {UNSPECIFIC})), min_size=1)


@settings(max_examples=100, deadline=None)
@given(st.lists(labels, max_size=12))
def test_record_count_equals_sum_of_specific_purposes(purpose_sets):
    v = verdict(stmts=[stmt("x")])
    records, tallies = expand_and_categorize([(v, s, []) for s in purpose_sets])
    assert len(records) == sum(len(s - {UNSPECIFIC}) for s in purpose_sets)
    assert tallies.records == len(records)
    assert tallies.unspecific == sum(1 for s in purpose_sets if not s - {UNSPECIFIC})


words = st.lists(st.sampled_from("alpha beta gamma delta eps zeta eta theta".split()), min_size=1, max_size=6)


@settings(max_examples=100, deadline=None)
@given(words, words)
def test_containment_symmetric(a, b):
    ba, bb = bag_of_words(" ".join(a)), bag_of_words(" ".join(b))
    assert contains_either_way(ba, bb) == contains_either_way(bb, ba)
    assert contains_either_way(ba, bb) == (ba <= bb or bb <= ba)
