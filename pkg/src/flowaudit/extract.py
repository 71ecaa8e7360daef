"""Data-type detection over transactions and grouping into data flows."""

from __future__ import annotations

import hashlib
import json
import re
from collections import defaultdict
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping
from urllib.parse import parse_qsl

import yaml

from .ingest import HttpTransaction

CATEGORIES = ("PII", "Fingerprint", "VRSensoryData")
REGIONS = ("path", "query", "header", "body")
KINDS = ("literal", "pattern", "key", "static", "hash")

_SEPARATORS = re.compile(r"[-_]+")
_FORM_KEY = re.compile(r"(?:^|[&?;\s,{])([A-Za-z0-9_.\-]+)=")
_QUOTED_KEY = re.compile(r'"((?:[^"\\]|\\.)+)"\s*:')
# bytes outside printable ASCII are masked so matches stay inside ASCII spans
_ASCII_MASK = bytes(b if 0x20 <= b < 0x7F or b in (9, 10, 13) else 0 for b in range(256))


def normalize_key(key: str) -> str:
    return _SEPARATORS.sub("_", key.strip().lower())


def hash_variants(value: str) -> set[str]:
    """The value itself plus its lowercase MD5 and SHA1 hex digests."""
    if not value:
        raise ValueError("hash_variants needs a non-empty value")
    raw = value.encode("utf-8")
    return {value, hashlib.md5(raw).hexdigest(), hashlib.sha1(raw).hexdigest()}


@dataclass(frozen=True)
class ExtractionRule:
    data_type: str
    category: str
    literals: tuple[str, ...] = ()
    patterns: tuple[str, ...] = ()
    key_names: tuple[str, ...] = ()
    static_values: tuple[str, ...] = ()

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"{self.data_type}: unknown category {self.category!r}")
        object.__setattr__(self, "_compiled", tuple(re.compile(p) for p in self.patterns))
        object.__setattr__(self, "_keys", frozenset(normalize_key(k) for k in self.key_names))
        object.__setattr__(self, "_literals", tuple(lit.lower() for lit in self.literals if lit))
        statics = []
        for value in self.static_values:
            if not value:
                continue
            statics.append(("static", value.lower()))
            for digest in sorted(hash_variants(value) - {value}):
                statics.append(("hash", digest))
        object.__setattr__(self, "_statics", tuple(statics))


@dataclass(frozen=True, order=True)
class Detection:
    txn_index: int
    region: str
    offset: int
    data_type: str
    kind: str
    matched: str

    def to_json(self) -> dict:
        return {"txn": self.txn_index, "region": self.region, "offset": self.offset,
                "data_type": self.data_type, "kind": self.kind, "matched": self.matched}

    @classmethod
    def from_json(cls, record: dict) -> "Detection":
        return cls(record["txn"], record["region"], record["offset"], record["data_type"],
                   record["kind"], record["matched"])


@dataclass
class DataFlow:
    app_id: str
    data_type: str
    destination_fqdn: str
    evidence: list[Detection] = field(default_factory=list)
    category: str = ""

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.app_id, self.data_type, self.destination_fqdn)

    def to_json(self) -> dict:
        return {"app": self.app_id, "data_type": self.data_type, "category": self.category,
                "destination": self.destination_fqdn,
                "evidence": [d.to_json() for d in self.evidence]}

    @classmethod
    def from_json(cls, record: dict) -> "DataFlow":
        return cls(record["app"], record["data_type"], record["destination"],
                   [Detection.from_json(d) for d in record.get("evidence", [])],
                   record.get("category", ""))


# -- loading ---------------------------------------------------------------

def _read_structured(path: Path):
    text = Path(path).read_text(encoding="utf-8")
    if Path(path).suffix == ".json":
        return json.loads(text)
    return yaml.safe_load(text)


def load_profile(path: str | Path | None) -> dict[str, str]:
    if path is None:
        return {}
    data = _read_structured(Path(path)) or {}
    return {str(k): str(v) for k, v in (data.get("static_values") or {}).items() if v is not None}


def load_rules(path: str | Path | None = None,
               static_values: Mapping[str, str] | None = None) -> list[ExtractionRule]:
    """Load a rules file (YAML or JSON); the bundled table when ``path`` is None.

    ``static_value_refs`` in the file are looked up in ``static_values``;
    refs with no profile value are dropped.
    """
    if path is None:
        text = resources.files("flowaudit").joinpath("data/rules.yaml").read_text(encoding="utf-8")
        entries = yaml.safe_load(text)
    else:
        entries = _read_structured(Path(path))
    static_values = static_values or {}
    rules = []
    seen: dict[str, str] = {}
    for entry in entries:
        dt = entry["data_type"]
        if dt in seen and seen[dt] != entry["category"]:
            raise ValueError(f"data type {dt!r} listed under two categories")
        seen[dt] = entry["category"]
        refs = entry.get("static_value_refs") or []
        statics = tuple(static_values[r] for r in refs if static_values.get(r))
        rules.append(ExtractionRule(
            data_type=dt,
            category=entry["category"],
            literals=tuple(entry.get("literals") or ()),
            patterns=tuple(entry.get("patterns") or ()),
            key_names=tuple(entry.get("key_names") or ()),
            static_values=statics + tuple(entry.get("static_values") or ()),
        ))
    return rules


def category_map(rules: Iterable[ExtractionRule]) -> dict[str, str]:
    return {r.data_type: r.category for r in rules}


# -- scanning --------------------------------------------------------------

def _regions(txn: HttpTransaction) -> list[tuple[str, str]]:
    """(region name, text) in search order.

    Header lines are laid out as ``Key: Value`` joined by CRLF so offsets in
    the header region are stable.
    """
    header_text = "\r\n".join(f"{k}: {v}" for k, v in txn.headers)
    body_text = txn.body.translate(_ASCII_MASK).decode("latin-1")
    return [("path", txn.path), ("query", txn.query), ("header", header_text), ("body", body_text)]


def _walk_json_keys(node, out: list[str]) -> None:
    if isinstance(node, dict):
        for k, v in node.items():
            out.append(str(k))
            _walk_json_keys(v, out)
    elif isinstance(node, list):
        for item in node:
            _walk_json_keys(item, out)


def _keys_in(region: str, text: str, txn: HttpTransaction) -> list[tuple[str, int]]:
    """Keys found in one region with the offset where each key starts."""
    keys: list[tuple[str, int]] = []
    if region == "query":
        pos = 0
        for part in text.split("&"):
            name = part.split("=", 1)[0]
            if name:
                keys.append((name, pos))
            pos += len(part) + 1
        return keys
    if region == "header":
        pos = 0
        for k, v in txn.headers:
            keys.append((k, pos))
            pos += len(k) + len(v) + 4
        return keys
    if region == "body":
        stripped = text.strip()
        if stripped[:1] in ("{", "["):
            try:
                doc = json.loads(stripped, strict=False)
            except ValueError:
                doc = None
            if doc is not None:
                names: list[str] = []
                _walk_json_keys(doc, names)
                cursor: dict[str, int] = {}
                for name in names:
                    found = text.find(json.dumps(name), cursor.get(name, 0))
                    if found < 0:
                        keys.append((name, 0))
                        continue
                    cursor[name] = found + 1
                    keys.append((name, found + 1))
                return keys
        for m in _FORM_KEY.finditer(text):
            keys.append((m.group(1), m.start(1)))
        for m in _QUOTED_KEY.finditer(text):
            keys.append((m.group(1), m.start(1)))
        # form bodies also decode as a query string
        if "=" in text and "\x00" not in text:
            for name, _ in parse_qsl(text, keep_blank_values=True):
                if name and not any(k == name for k, _ in keys):
                    idx = text.find(name)
                    keys.append((name, max(idx, 0)))
    return keys


def _find_all(haystack: str, needle: str) -> Iterable[int]:
    start = haystack.find(needle)
    while start >= 0:
        yield start
        start = haystack.find(needle, start + 1)


def scan(txn: HttpTransaction, rules: Iterable[ExtractionRule], txn_index: int = -1) -> list[Detection]:
    """Every rule match in a transaction, sorted by region order then offset.

    Matches from the same rule at the same (offset, length) are reported
    once; matches from different rules are all kept.
    """
    rules = list(rules)
    found: set[Detection] = set()
    for region, text in _regions(txn):
        if not text:
            continue
        lowered = text.lower()
        keys = [(normalize_key(k), k, off) for k, off in _keys_in(region, text, txn)]
        for rule in rules:
            spans: set[tuple[int, int]] = set()

            def add(kind: str, start: int, matched: str) -> None:
                if (start, len(matched)) in spans:
                    return
                spans.add((start, len(matched)))
                found.add(Detection(txn_index, region, start, rule.data_type, kind, matched))

            for kind, needle in rule._statics:
                for start in _find_all(lowered, needle):
                    add(kind, start, text[start:start + len(needle)])
            for lit in rule._literals:
                for start in _find_all(lowered, lit):
                    add("literal", start, text[start:start + len(lit)])
            for rx in rule._compiled:
                for m in rx.finditer(text):
                    if m.end() > m.start():
                        add("pattern", m.start(), m.group(0))
            for norm, raw, off in keys:
                if norm in rule._keys:
                    add("key", off, raw)
    order = {name: i for i, name in enumerate(REGIONS)}
    return sorted(found, key=lambda d: (d.txn_index, order[d.region], d.offset, d.data_type,
                                        d.kind, d.matched))


def scan_all(txns: Iterable[HttpTransaction], rules: Iterable[ExtractionRule]) -> list[Detection]:
    rules = list(rules)
    dets = []
    for i, txn in enumerate(txns):
        dets.extend(scan(txn, rules, i))
    return dets


def flows_from_detections(dets: Iterable[Detection], txns: list[HttpTransaction],
                          categories: Mapping[str, str] | None = None) -> list[DataFlow]:
    """Group detections into one flow per (app, data type, destination host)."""
    categories = categories or {}
    order = {name: i for i, name in enumerate(REGIONS)}
    grouped: dict[tuple[str, str, str], list[Detection]] = defaultdict(list)
    for det in dets:
        txn = txns[det.txn_index]
        if not txn.host:
            raise ValueError(f"transaction {det.txn_index} has no host")
        grouped[(txn.app_id, det.data_type, txn.host)].append(det)
    flows = []
    for key in sorted(grouped):
        evidence = sorted(grouped[key], key=lambda d: (d.txn_index, order[d.region], d.offset,
                                                       d.kind, d.matched))
        flows.append(DataFlow(*key, evidence=evidence, category=categories.get(key[1], "")))
    return flows


def extract_flows(txns: list[HttpTransaction], rules: list[ExtractionRule]) -> list[DataFlow]:
    return flows_from_detections(scan_all(txns, rules), txns, category_map(rules))
