from __future__ import annotations

import hashlib

import pytest
from hypothesis import given, strategies as st

from flowaudit.extract import (DataFlow, Detection, ExtractionRule, category_map, extract_flows,
                               hash_variants, load_profile, load_rules, normalize_key, scan,
                               scan_all)
from flowaudit.ingest import HttpTransaction

from extraction_corpus import CASES, MD5, PROFILE, SHA1, txn


@pytest.fixture(scope="module")
def rules():
    return load_rules(static_values=PROFILE)


def test_bundled_rules_cover_all_types(rules):
    cats = category_map(rules)
    assert len(cats) == 21
    assert sorted(set(cats.values())) == ["Fingerprint", "PII", "VRSensoryData"]


@pytest.mark.parametrize("name,transaction,expected", CASES, ids=[c[0] for c in CASES])
def test_corpus_types(rules, name, transaction, expected):
    assert {d.data_type for d in scan(transaction, rules)} == expected


def test_corpus_size():
    assert len(CASES) == 30


@given(st.text(min_size=1, max_size=40))
def test_hash_variants_match_hashlib(value):
    raw = value.encode("utf-8")
    assert hash_variants(value) == {value, hashlib.md5(raw).hexdigest(), hashlib.sha1(raw).hexdigest()}


def test_hash_variants_reject_empty():
    with pytest.raises(ValueError):
        hash_variants("")


def test_hash_detection_kind(rules):
    dets = scan(txn("/x", f"a={MD5['serial_number']}&b={SHA1['serial_number']}"), rules)
    assert {(d.kind, d.matched) for d in dets} == {("hash", MD5["serial_number"]),
                                                   ("hash", SHA1["serial_number"])}


@pytest.mark.parametrize("raw,norm", [("X-Unity-Version", "x_unity_version"),
                                      ("x--unity--version", "x_unity_version"),
                                      ("device__id", "device_id")])
def test_normalize_key(raw, norm):
    assert normalize_key(raw) == norm


def test_offsets_point_at_match(rules):
    t = txn("/a", "z=1&user_id=5", [("User-Agent", "UnityPlayer/2019.4.2")])
    for d in scan(t, rules):
        region = dict(header="\r\n".join(f"{k}: {v}" for k, v in t.headers), query=t.query, path=t.path)[d.region]
        assert region[d.offset:d.offset + len(d.matched)] == d.matched


def test_literal_is_case_insensitive_pattern_is_not(rules):
    assert {d.data_type for d in scan(txn(headers=[("X", "arcore")]), rules)} == {"SDK Version"}
    assert scan(txn(headers=[("X", "unityplayer/2020.1.1")]), rules) == []


def test_binary_body_masked(rules):
    t = txn("/b", body=b"\x00\xff" + PROFILE["serial_number"].encode() + b"\x01", method="POST")
    (d,) = scan(t, rules)
    assert (d.region, d.offset, d.kind) == ("body", 2, "static")


def test_unknown_category_rejected():
    with pytest.raises(ValueError):
        ExtractionRule("X", "Biometrics")


def test_custom_rules_file(tmp_path):
    (tmp_path / "r.yaml").write_text(
        "- data_type: Shoe Size\n  category: PII\n  key_names: [shoe]\n  static_value_refs: [shoe]\n")
    (tmp_path / "p.yaml").write_text("static_values:\n  shoe: '47'\n")
    rules = load_rules(tmp_path / "r.yaml", load_profile(tmp_path / "p.yaml"))
    assert rules[0].static_values == ("47",)
    assert [d.kind for d in scan(txn("/", "shoe=47"), rules)] == ["key", "static"]


def test_conflicting_categories_rejected(tmp_path):
    (tmp_path / "r.yaml").write_text("- {data_type: A, category: PII}\n- {data_type: A, category: Fingerprint}\n")
    with pytest.raises(ValueError):
        load_rules(tmp_path / "r.yaml")


def test_flows_group_by_app_type_host(rules):
    txns = [txn("/a", "user_id=1"), txn("/b", "user_id=2"), txn("/c", "user_id=3", host="other.net")]
    flows = extract_flows(txns, rules)
    assert [(f.data_type, f.destination_fqdn, len(f.evidence)) for f in flows] == [
        ("User ID", "api.example.net", 2), ("User ID", "other.net", 1)]
    assert flows[0].category == "PII"
    assert DataFlow.from_json(flows[0].to_json()) == flows[0]


def test_detection_json_roundtrip(rules):
    (d,) = scan_all([txn("/", "language=en")], rules)
    assert isinstance(d, Detection) and Detection.from_json(d.to_json()) == d


def test_empty_transaction(rules):
    assert scan(HttpTransaction("a", 0, "h"), rules) == []
