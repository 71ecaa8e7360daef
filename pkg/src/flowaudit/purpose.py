"""Attach data-collection purposes to consistent flows.

Statement sentences are matched to annotated policy segments by
bag-of-words containment; the matched segments' purpose labels are then
expanded to one record per (flow, purpose).
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .consistency import DisclosureVerdict, NotConsistent

CORE = "Core"
UNRELATED = "Unrelated"
UNSPECIFIC_CLASS = "Unspecific"

UNSPECIFIC = "unspecific"
CORE_PURPOSES = frozenset({
    "basic service feature",
    "service operation and security",
    "personalization customization",
    "legal requirement",
    "merger acquisition",
})
UNRELATED_PURPOSES = frozenset({
    "advertising",
    "analytics research",
    "marketing",
    "additional service feature",
})
PURPOSES = CORE_PURPOSES | UNRELATED_PURPOSES
LABELS = PURPOSES | {UNSPECIFIC}

_WORD = re.compile(r"[a-z0-9]+")
# sentence ends at . ! ? unless the period sits between digits (version numbers, decimals)
_SENTENCE_END = re.compile(r"(?<!\d)[.!?]+|[.!?]+(?!\d)")


def normalize_label(label: str) -> str:
    norm = " ".join(_WORD.findall(label.lower()))
    if norm not in LABELS:
        raise ValueError(f"unknown purpose label {label!r}")
    return norm


def functional_class(label: str) -> str:
    label = normalize_label(label)
    if label in CORE_PURPOSES:
        return CORE
    if label in UNRELATED_PURPOSES:
        return UNRELATED
    return UNSPECIFIC_CLASS


def bag_of_words(text: str) -> frozenset[str]:
    """Binary bag of words: lowercase alphanumeric tokens longer than one character."""
    return frozenset(t for t in _WORD.findall(text.lower()) if len(t) > 1)


def split_sentences(text: str) -> list[str]:
    parts = _SENTENCE_END.split(text)
    return [p.strip() for p in parts if p.strip()]


def contains_either_way(a: frozenset[str], b: frozenset[str]) -> bool:
    return bool(a) and bool(b) and (a <= b or b <= a)


@dataclass(frozen=True)
class AnnotatedSegment:
    policy_id: str
    segment_id: str
    text: str
    purposes: frozenset[str] = frozenset()

    def __post_init__(self):
        labels = frozenset(normalize_label(p) for p in self.purposes)
        object.__setattr__(self, "purposes", labels or frozenset({UNSPECIFIC}))
        object.__setattr__(self, "_bag", bag_of_words(self.text))
        object.__setattr__(self, "_sentence_bags",
                           tuple(bag_of_words(s) for s in split_sentences(self.text)))

    def matches(self, sentence: str) -> bool:
        bag = bag_of_words(sentence)
        if not bag:
            return False
        if bag <= self._bag:
            return True
        return any(contains_either_way(bag, s) for s in self._sentence_bags)

    @classmethod
    def from_json(cls, record: dict) -> "AnnotatedSegment":
        return cls(str(record.get("policy_id", "")), str(record["segment_id"]), record["text"],
                   frozenset(record.get("purposes") or ()))


def load_segments(path: str | Path | None) -> list[AnnotatedSegment]:
    if path is None:
        return []
    with open(path, encoding="utf-8") as fh:
        return [AnnotatedSegment.from_json(json.loads(line)) for line in fh if line.strip()]


def match_segment(sentence: str, segments: Iterable[AnnotatedSegment]) -> AnnotatedSegment | None:
    """First segment, in document order, that matches the sentence."""
    for seg in segments:
        if seg.matches(sentence):
            return seg
    return None


def match_segments(sentence: str, segments: Iterable[AnnotatedSegment]) -> list[AnnotatedSegment]:
    return [seg for seg in segments if seg.matches(sentence)]


def _segments_for(policy: str, segments: list[AnnotatedSegment]) -> list[AnnotatedSegment]:
    return [s for s in segments if s.policy_id == policy]


def annotate_flow(verdict: DisclosureVerdict, segments: list[AnnotatedSegment],
                  first_match_only: bool = False) -> tuple[frozenset[str], list[str]]:
    """Purpose labels for a consistent verdict plus the provenance segment ids.

    Each matched collect statement is looked up in the segments of the
    policy it came from. ``unspecific`` is only returned when nothing more
    specific was found.
    """
    if not verdict.consistent:
        raise NotConsistent(f"{verdict.flow} is {verdict.disclosure}")
    labels: set[str] = set()
    provenance: list[str] = []
    for stmt in verdict.matched_collect:
        pool = _segments_for(stmt.source_policy or stmt.app_id, segments)
        if first_match_only:
            hit = match_segment(stmt.sentence_text, pool)
            hits = [hit] if hit else []
        else:
            hits = match_segments(stmt.sentence_text, pool)
        for seg in hits:
            labels |= seg.purposes
            if seg.segment_id not in provenance:
                provenance.append(seg.segment_id)
    specific = labels - {UNSPECIFIC}
    return (frozenset(specific) if specific else frozenset({UNSPECIFIC})), provenance


@dataclass(frozen=True)
class PurposedFlow:
    app_id: str
    data_type: str
    destination: str
    entity: str
    party: str
    purpose: str
    functional_class: str
    segment_ids: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {"app": self.app_id, "data_type": self.data_type, "destination": self.destination,
                "entity": self.entity, "party": self.party, "purpose": self.purpose,
                "class": self.functional_class, "segments": list(self.segment_ids)}

    @classmethod
    def from_json(cls, record: dict) -> "PurposedFlow":
        return cls(record["app"], record["data_type"], record["destination"], record["entity"],
                   record["party"], record["purpose"], record["class"],
                   tuple(record.get("segments", ())))


@dataclass
class PurposeTallies:
    core: int = 0
    unrelated: int = 0
    unspecific: int = 0
    by_purpose: Counter = field(default_factory=Counter)
    by_party: Counter = field(default_factory=Counter)

    @property
    def records(self) -> int:
        return self.core + self.unrelated

    def to_json(self) -> dict:
        return {"core": self.core, "unrelated": self.unrelated, "unspecific_flows": self.unspecific,
                "records": self.records, "by_purpose": dict(sorted(self.by_purpose.items())),
                "by_party": dict(sorted(self.by_party.items()))}


def expand_and_categorize(items: Iterable[tuple[DisclosureVerdict, Iterable[str], Iterable[str]]]
                          ) -> tuple[list[PurposedFlow], PurposeTallies]:
    """One record per (flow, purpose); unspecific-only flows are only counted.

    ``items`` yields (verdict, purpose labels, provenance segment ids).
    """
    records = []
    tallies = PurposeTallies()
    for verdict, purposes, provenance in items:
        labels = sorted({normalize_label(p) for p in purposes})
        specific = [p for p in labels if p != UNSPECIFIC]
        if not specific:
            tallies.unspecific += 1
            continue
        f = verdict.flow
        for purpose in specific:
            cls = functional_class(purpose)
            records.append(PurposedFlow(f.app_id, f.data_type, f.destination, f.entity, f.party,
                                        purpose, cls, tuple(provenance)))
            tallies.by_purpose[purpose] += 1
            tallies.by_party[f.party] += 1
            if cls == CORE:
                tallies.core += 1
            else:
                tallies.unrelated += 1
    return records, tallies


def attach_purposes(verdicts: Iterable[DisclosureVerdict], segments: list[AnnotatedSegment],
                    first_match_only: bool = False) -> tuple[list[PurposedFlow], PurposeTallies]:
    items = []
    for v in verdicts:
        if v.consistent:
            labels, provenance = annotate_flow(v, segments, first_match_only)
            items.append((v, labels, provenance))
    return expand_and_categorize(items)
