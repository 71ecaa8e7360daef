"""Flow-to-policy disclosure classification.

Each data flow ``<data type, entity>`` is compared with the app's collection
statements through the data and entity ontologies and labelled clear,
vague, omitted, ambiguous or incorrect.
"""

from __future__ import annotations

import json
import logging
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

from .destination import AppMeta
from .ontology import Ontology, UnresolvedTerm, normalize_term

log = logging.getLogger(__name__)

COLLECT = "collect"
NOT_COLLECT = "not_collect"

CLEAR = "clear"
VAGUE = "vague"
OMITTED = "omitted"
AMBIGUOUS = "ambiguous"
INCORRECT = "incorrect"
CLASSES = (CLEAR, VAGUE, OMITTED, AMBIGUOUS, INCORRECT)
CONSISTENT = frozenset({CLEAR, VAGUE})

FIRST_PERSON = frozenset({"we", "us", "our", "ours", "i", "me", "my"})
FIRST_PARTY = "we"


class UnknownReferencedEntity(UserWarning):
    pass


class NotConsistent(ValueError):
    pass


@dataclass(frozen=True)
class CollectionStatement:
    app_id: str
    entity: str
    action: str
    data_type: str
    sentence_id: str = ""
    sentence_text: str = ""
    source_policy: str = ""

    def __post_init__(self):
        if self.action not in (COLLECT, NOT_COLLECT):
            raise ValueError(f"unknown action {self.action!r}")

    def to_json(self) -> dict:
        return {"app": self.app_id, "entity": self.entity, "action": self.action,
                "data_type": self.data_type, "sentence_id": self.sentence_id,
                "sentence": self.sentence_text, "source_policy": self.source_policy}

    @classmethod
    def from_json(cls, record: dict) -> "CollectionStatement":
        return cls(
            app_id=record["app"],
            entity=record["entity"],
            action=record["action"],
            data_type=record["data_type"],
            sentence_id=str(record.get("sentence_id", "")),
            sentence_text=record.get("sentence", record.get("sentence_text", "")),
            source_policy=record.get("source_policy") or record["app"],
        )


@dataclass(frozen=True)
class FlowKey:
    data_type: str
    entity: str
    app_id: str = ""
    destination: str = ""
    party: str = ""
    category: str = ""


@dataclass
class DisclosureVerdict:
    flow: FlowKey
    disclosure: str
    matched_collect: list[CollectionStatement] = field(default_factory=list)
    matched_not_collect: list[CollectionStatement] = field(default_factory=list)
    conflicting_sentences: list[str] = field(default_factory=list)

    @property
    def consistent(self) -> bool:
        return self.disclosure in CONSISTENT

    def to_json(self) -> dict:
        f = self.flow
        return {
            "app": f.app_id, "data_type": f.data_type, "destination": f.destination,
            "entity": f.entity, "party": f.party, "category": f.category,
            "disclosure": self.disclosure, "consistent": self.consistent,
            "matched_collect": [s.to_json() for s in self.matched_collect],
            "matched_not_collect": [s.to_json() for s in self.matched_not_collect],
            "conflicting_sentences": list(self.conflicting_sentences),
        }

    @classmethod
    def from_json(cls, record: dict) -> "DisclosureVerdict":
        flow = FlowKey(record["data_type"], record["entity"], record.get("app", ""),
                       record.get("destination", ""), record.get("party", ""),
                       record.get("category", ""))
        return cls(flow, record["disclosure"],
                   [CollectionStatement.from_json(s) for s in record.get("matched_collect", [])],
                   [CollectionStatement.from_json(s) for s in record.get("matched_not_collect", [])],
                   list(record.get("conflicting_sentences", [])))


def load_statements(path: str | Path | None) -> list[CollectionStatement]:
    if path is None:
        return []
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(CollectionStatement.from_json(json.loads(line)))
    return out


def library_from_statements(stmts: Iterable[CollectionStatement]) -> dict[str, list[CollectionStatement]]:
    """Group a policy-library file by owner; ``app`` names the owning entity."""
    lib: dict[str, list[CollectionStatement]] = defaultdict(list)
    for s in stmts:
        lib[normalize_term(s.source_policy or s.app_id)].append(s)
    return dict(lib)


def merge_policies(app_stmts: Iterable[CollectionStatement], meta: AppMeta,
                   library: Mapping[str, list[CollectionStatement]],
                   auto_include: Iterable[str] = ()) -> list[CollectionStatement]:
    """App statements plus those of every referenced or auto-included policy.

    First-person entities in an included policy are rewritten to the
    policy owner's name, and the statement is re-attributed to the app.
    """
    merged = list(app_stmts)
    lib = {normalize_term(k): v for k, v in library.items()}
    wanted: list[str] = []
    for name in list(meta.referenced_policies) + list(auto_include):
        key = normalize_term(name)
        if key not in wanted:
            wanted.append(key)
    for key in wanted:
        if key not in lib:
            warnings.warn(f"{meta.app_id}: no policy library entry for {key!r}",
                          UnknownReferencedEntity, stacklevel=2)
            continue
        for s in lib[key]:
            entity = key if normalize_term(s.entity) in FIRST_PERSON else s.entity
            merged.append(replace(s, app_id=meta.app_id, entity=entity, source_policy=key))
    return merged


def resolve_first_party(stmt: CollectionStatement, meta: AppMeta) -> CollectionStatement:
    aliases = {normalize_term(a) for a in meta.first_party_aliases} | FIRST_PERSON
    if normalize_term(stmt.entity) in aliases:
        return replace(stmt, entity=FIRST_PARTY)
    return stmt


def classify(flow: FlowKey, stmts: Iterable[CollectionStatement], data_ont: Ontology,
             entity_ont: Ontology) -> DisclosureVerdict:
    """Five-way disclosure class for one flow.

    Statements whose terms do not resolve in the ontologies are ignored.
    Raises UnresolvedTerm when the flow's own terms do not resolve.
    """
    flow_dt = data_ont.resolve(flow.data_type)
    flow_en = entity_ont.resolve(flow.entity)
    if not flow_dt.resolved:
        raise UnresolvedTerm(flow.data_type)
    if not flow_en.resolved:
        raise UnresolvedTerm(flow.entity)
    dt_up = data_ont.ancestors(flow_dt)
    en_up = entity_ont.ancestors(flow_en)
    collect, not_collect = [], []
    exact = False
    for s in stmts:
        s_dt = data_ont.resolve(s.data_type)
        s_en = entity_ont.resolve(s.entity)
        if not (s_dt.resolved and s_en.resolved):
            continue
        if s_dt.node not in dt_up or s_en.node not in en_up:
            continue
        if s.action == COLLECT:
            collect.append(s)
            exact = exact or (s_dt.node == flow_dt.node and s_en.node == flow_en.node)
        else:
            not_collect.append(s)
    if not collect and not not_collect:
        disclosure = OMITTED
    elif collect and not not_collect:
        disclosure = CLEAR if exact else VAGUE
    elif not_collect and not collect:
        disclosure = INCORRECT
    else:
        disclosure = AMBIGUOUS
    key = lambda s: (s.source_policy, s.sentence_id, s.entity, s.data_type, s.sentence_text)
    collect.sort(key=key)
    not_collect.sort(key=key)
    conflicts = sorted({s.sentence_id for s in collect if s.sentence_id}
                       & {s.sentence_id for s in not_collect if s.sentence_id})
    return DisclosureVerdict(flow, disclosure, collect, not_collect, conflicts)


@dataclass
class ConsistencyTotals:
    by_class: Counter = field(default_factory=Counter)
    by_category: dict[str, Counter] = field(default_factory=dict)
    by_entity: dict[str, Counter] = field(default_factory=dict)
    consistent: int = 0
    inconsistent: int = 0

    @property
    def total(self) -> int:
        return self.consistent + self.inconsistent

    @property
    def consistent_ratio(self) -> float:
        return self.consistent / self.total if self.total else 0.0

    def histogram(self) -> dict[str, int]:
        return {c: self.by_class.get(c, 0) for c in CLASSES}


def summarize(verdicts: Iterable[DisclosureVerdict]) -> ConsistencyTotals:
    totals = ConsistencyTotals()
    by_cat: dict[str, Counter] = defaultdict(Counter)
    by_ent: dict[str, Counter] = defaultdict(Counter)
    for v in verdicts:
        totals.by_class[v.disclosure] += 1
        by_cat[v.flow.category or "unknown"][v.disclosure] += 1
        by_ent[v.flow.entity][v.disclosure] += 1
        if v.consistent:
            totals.consistent += 1
        else:
            totals.inconsistent += 1
    totals.by_category = dict(sorted(by_cat.items()))
    totals.by_entity = dict(sorted(by_ent.items()))
    return totals


@dataclass
class PolicyChecker:
    """Bundles ontologies, statements and app metadata for batch checking."""

    data_ontology: Ontology
    entity_ontology: Ontology
    statements: list[CollectionStatement] = field(default_factory=list)
    apps: Mapping[str, AppMeta] = field(default_factory=dict)
    library: Mapping[str, list[CollectionStatement]] = field(default_factory=dict)
    auto_include: tuple[str, ...] = ()

    def __post_init__(self):
        by_app: dict[str, list[CollectionStatement]] = defaultdict(list)
        for s in self.statements:
            by_app[s.app_id].append(s)
        self._by_app = by_app
        self._merged: dict[str, list[CollectionStatement]] = {}

    def statements_for(self, app_id: str) -> list[CollectionStatement]:
        if app_id not in self._merged:
            meta = self.apps.get(app_id) or AppMeta(app_id)
            own = [replace(s, source_policy=s.source_policy or app_id) for s in self._by_app.get(app_id, [])]
            merged = merge_policies(own, meta, self.library, self.auto_include)
            self._merged[app_id] = [resolve_first_party(s, meta) for s in merged]
        return self._merged[app_id]

    def check(self, flow: FlowKey) -> DisclosureVerdict:
        return classify(flow, self.statements_for(flow.app_id), self.data_ontology, self.entity_ontology)
