"""Term DAGs with synonym lists, answering subsumption queries.

An edge ``child -> parent`` means the parent is the broader term. Closures
are computed once at load time, so queries are plain set lookups and the
object can be shared between threads without locking.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable

log = logging.getLogger(__name__)

_PUNCT = re.compile(r"[^\w\s-]|(?<![\w])-|-(?![\w])|_")
_SPACES = re.compile(r"\s+")


class OntologyError(ValueError):
    pass


class CycleDetected(OntologyError):
    def __init__(self, path: list[str]):
        super().__init__("cycle: " + " -> ".join(path))
        self.path = path


class DanglingSynonym(OntologyError):
    def __init__(self, alias: str, target: str):
        super().__init__(f"synonym {alias!r} points at unknown term {target!r}")
        self.alias = alias
        self.target = target


class DuplicateNode(OntologyError):
    def __init__(self, term: str):
        super().__init__(f"term {term!r} declared twice")
        self.term = term


class UnresolvedTerm(KeyError):
    def __init__(self, raw: str):
        super().__init__(raw)
        self.raw = raw

    def __str__(self) -> str:
        return f"unresolved term {self.raw!r}"


def normalize_term(text: str) -> str:
    """Lowercase, drop punctuation other than internal hyphens, collapse spaces."""
    text = _PUNCT.sub(" ", text.lower())
    return _SPACES.sub(" ", text).strip()


@dataclass(frozen=True)
class TermRef:
    raw: str
    node: str | None

    @property
    def resolved(self) -> bool:
        return self.node is not None


@dataclass
class Ontology:
    kind: str
    parents: dict[str, tuple[str, ...]]
    synonyms: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.nodes = frozenset(self.parents)
        for alias, target in self.synonyms.items():
            if target not in self.nodes:
                raise DanglingSynonym(alias, target)
        self._check_acyclic()
        self._ancestors: dict[str, frozenset[str]] = {}
        for node in self.topological_order():
            up = {node}
            for p in self.parents[node]:
                up |= self._ancestors[p]
            self._ancestors[node] = frozenset(up)
        self.unresolved: set[str] = set()
        self._lookup: dict[str, str | None] = {}

    def _check_acyclic(self) -> None:
        state: dict[str, int] = {}
        for start in sorted(self.parents):
            if state.get(start):
                continue
            stack = [(start, iter(self.parents[start]))]
            path = [start]
            state[start] = 1
            while stack:
                node, it = stack[-1]
                nxt = next(it, None)
                if nxt is None:
                    state[node] = 2
                    stack.pop()
                    path.pop()
                elif state.get(nxt) == 1:
                    raise CycleDetected(path[path.index(nxt):] + [nxt])
                elif not state.get(nxt):
                    state[nxt] = 1
                    stack.append((nxt, iter(self.parents[nxt])))
                    path.append(nxt)

    def topological_order(self) -> list[str]:
        """Broader terms first."""
        order: list[str] = []
        done: set[str] = set()
        for start in sorted(self.parents):
            stack = [(start, False)]
            while stack:
                node, expanded = stack.pop()
                if node in done:
                    continue
                if expanded:
                    done.add(node)
                    order.append(node)
                    continue
                stack.append((node, True))
                for p in self.parents[node]:
                    if p not in done:
                        stack.append((p, False))
        return order

    @property
    def leaves(self) -> frozenset[str]:
        has_child = {p for ps in self.parents.values() for p in ps}
        return self.nodes - has_child

    @property
    def roots(self) -> frozenset[str]:
        return frozenset(n for n, ps in self.parents.items() if not ps)

    def resolve(self, raw: str | TermRef) -> TermRef:
        """Synonym lookup, then exact node match; never raises."""
        if isinstance(raw, TermRef):
            return raw if raw.resolved else self.resolve(raw.raw)
        if raw in self._lookup:
            return TermRef(raw, self._lookup[raw])
        key = normalize_term(raw)
        node = self.synonyms.get(key)
        if node is None and key in self.nodes:
            node = key
        if node is None:
            spaced = key.replace("-", " ")
            node = self.synonyms.get(spaced) or (spaced if spaced in self.nodes else None)
        if node is None and key not in self.unresolved:
            self.unresolved.add(key)
            log.debug("%s ontology: unresolved term %r", self.kind, raw)
        self._lookup[raw] = node
        return TermRef(raw, node)

    def _node(self, term: str | TermRef) -> str:
        if isinstance(term, str) and self._lookup.get(term) is not None:
            return self._lookup[term]
        ref = self.resolve(term)
        if ref.node is None:
            raise UnresolvedTerm(ref.raw)
        return ref.node

    def ancestors(self, term: str | TermRef) -> frozenset[str]:
        """All broader terms of ``term``, itself included."""
        return self._ancestors[self._node(term)]

    def subsumes(self, ancestor: str | TermRef, descendant: str | TermRef) -> bool:
        return self._node(ancestor) in self._ancestors[self._node(descendant)]

    def __len__(self) -> int:
        return len(self.nodes)


def _lines(source: str | Path | Iterable[str]) -> Iterable[str]:
    if isinstance(source, (str, Path)):
        return Path(source).read_text(encoding="utf-8").splitlines()
    return source


def build_ontology(kind: str, edges: Iterable[tuple[str, str | None]],
                   synonyms: Iterable[tuple[str, str]] = ()) -> Ontology:
    """Ontology from (child, parent) pairs; parent None declares a lone node."""
    parents: dict[str, list[str]] = {}
    spelling: dict[str, str] = {}

    def declare(raw: str) -> str:
        term = normalize_term(raw)
        if not term:
            raise OntologyError(f"empty term from {raw!r}")
        if term in spelling and spelling[term] != raw.strip():
            raise DuplicateNode(raw)
        spelling[term] = raw.strip()
        parents.setdefault(term, [])
        return term

    for child, parent in edges:
        c = declare(child)
        if parent is None:
            continue
        p = declare(parent)
        if p not in parents[c]:
            parents[c].append(p)
    syn: dict[str, str] = {}
    for alias, target in synonyms:
        a, t = normalize_term(alias), normalize_term(target)
        if a in parents and a != t:
            raise DuplicateNode(alias)
        if a in syn and syn[a] != t:
            raise DuplicateNode(alias)
        syn[a] = t
    return Ontology(kind, {k: tuple(v) for k, v in parents.items()}, syn)


def _tsv_pairs(source) -> list[tuple[str, str | None]]:
    pairs = []
    for line in _lines(source):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        left, sep, right = line.partition("\t")
        pairs.append((left.strip(), right.strip() if sep and right.strip() else None))
    return pairs


def load_ontology(edges_file, synonyms_file=None, kind: str = "data") -> Ontology:
    """Load ``child<TAB>parent`` edges and ``alias<TAB>canonical`` synonyms."""
    synonyms = [(a, t) for a, t in _tsv_pairs(synonyms_file) if t] if synonyms_file else []
    return build_ontology(kind, _tsv_pairs(edges_file), synonyms)


def _bundled(name: str) -> list[str]:
    return resources.files("flowaudit").joinpath(f"data/{name}").read_text(encoding="utf-8").splitlines()


def bundled_data_ontology() -> Ontology:
    return load_ontology(_bundled("data_ontology.tsv"), _bundled("data_synonyms.tsv"), kind="data")


def bundled_entity_ontology() -> Ontology:
    return load_ontology(_bundled("entity_ontology.tsv"), _bundled("entity_synonyms.tsv"), kind="entity")
