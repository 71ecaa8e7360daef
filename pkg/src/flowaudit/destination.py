"""Destination labelling: eSLD, owning entity, party and ATS verdict."""

from __future__ import annotations

import ipaddress
import json
import re
from collections import defaultdict
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping
from urllib.parse import urlsplit

import yaml

FIRST = "First"
THIRD = "Third"
PLATFORM = "Platform"
PARTIES = (FIRST, THIRD, PLATFORM)

UNKNOWN_ENTITY = "unknown third party"
FIRST_PARTY_ENTITY = "we"

DEFAULT_STOPLIST = frozenset({"com", "net", "org", "www", "app", "api", "the"})
DEFAULT_CLOUD_SUFFIXES = ("amazonaws.com", "cloudfunctions.net", "firebaseapp.com", "execute-api.*")
DEFAULT_PLATFORM_KEYWORDS = ("oculus", "facebook")
MIN_TOKEN_LEN = 3

_TOKEN_SPLIT = re.compile(r"[.\-_]+")
_URL_SPLIT = re.compile(r"[^a-z0-9]+")


def is_ip(host: str) -> bool:
    try:
        ipaddress.ip_address(host)
    except ValueError:
        return False
    return True


class PublicSuffixList:
    """Public suffix rules with the ICANN and private sections kept apart.

    ``include_private=False`` is plain-PSL mode: only ICANN rules apply, so
    ``s3-ap-southeast-2.amazonaws.com`` has eSLD ``amazonaws.com``.
    """

    def __init__(self, lines: Iterable[str], include_private: bool = False):
        self.include_private = include_private
        self.rules: set[str] = set()
        self.wildcards: set[str] = set()
        self.exceptions: set[str] = set()
        private = False
        for line in lines:
            line = line.strip()
            if "===BEGIN PRIVATE DOMAINS===" in line:
                private = True
            if not line or line.startswith("//"):
                continue
            if private and not include_private:
                continue
            rule = line.split()[0].lower()
            rule = rule.encode("idna").decode("ascii") if not rule.isascii() else rule
            if rule.startswith("!"):
                self.exceptions.add(rule[1:])
            elif rule.startswith("*."):
                self.wildcards.add(rule[2:])
            else:
                self.rules.add(rule)

    @classmethod
    def load(cls, path: str | Path | None = None, include_private: bool = False) -> "PublicSuffixList":
        if path is None:
            text = resources.files("flowaudit").joinpath("data/public_suffix_list.dat").read_text(
                encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        return cls(text.splitlines(), include_private)

    def suffix_length(self, labels: list[str]) -> tuple[int, bool]:
        """Label count of the public suffix and whether a listed rule matched."""
        best = 0
        for i in range(len(labels)):
            candidate = ".".join(labels[i:])
            n = len(labels) - i
            if candidate in self.exceptions:
                return n - 1, True
            if candidate in self.rules and n > best:
                best = n
            parent = ".".join(labels[i + 1:])
            if i + 1 < len(labels) and parent in self.wildcards and n > best:
                best = n
        if best:
            return best, True
        # implicit "*" rule: unknown TLDs are a one-label suffix
        return 1, False

    def public_suffix(self, fqdn: str) -> str:
        labels = fqdn.lower().rstrip(".").split(".")
        n, _ = self.suffix_length(labels)
        return ".".join(labels[-n:])

    def esld(self, fqdn: str) -> str:
        """Registrable domain; IP literals and bare suffixes pass through."""
        fqdn = fqdn.lower().rstrip(".")
        if is_ip(fqdn):
            return fqdn
        labels = fqdn.split(".")
        n, known = self.suffix_length(labels)
        if not known:
            return ".".join(labels[-2:])
        if n >= len(labels):
            return fqdn
        return ".".join(labels[-(n + 1):])


@lru_cache(maxsize=None)
def default_psl() -> PublicSuffixList:
    return PublicSuffixList.load()


def esld(fqdn: str, psl: PublicSuffixList | None = None) -> str:
    return (psl or default_psl()).esld(fqdn)


# -- entity map ------------------------------------------------------------

@dataclass
class EntityMap:
    """Domain patterns to entity names.

    ``*.example.com`` covers example.com and all its subdomains; a bare
    pattern covers exactly that host. The longest pattern wins, with exact
    patterns beating wildcards of equal length and earlier lines beating
    later ones.
    """

    entries: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self):
        self._exact: dict[str, str] = {}
        self._wild: dict[str, str] = {}
        for pattern, entity in self.entries:
            pattern = pattern.strip().lower().rstrip(".")
            if pattern.startswith("*."):
                self._wild.setdefault(pattern[2:], entity)
            else:
                self._exact.setdefault(pattern, entity)

    @classmethod
    def load(cls, path: str | Path | None = None) -> "EntityMap":
        if path is None:
            text = resources.files("flowaudit").joinpath("data/entity_map.tsv").read_text(
                encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        entries = []
        for line in text.splitlines():
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            pattern, _, entity = line.partition("\t")
            if not entity.strip():
                raise ValueError(f"entity map line without a tab-separated entity: {line!r}")
            entries.append((pattern.strip(), entity.strip()))
        return cls(entries)

    def lookup(self, fqdn: str) -> str | None:
        fqdn = fqdn.lower().rstrip(".")
        if fqdn in self._exact:
            return self._exact[fqdn]
        labels = fqdn.split(".")
        for i in range(len(labels)):
            entity = self._wild.get(".".join(labels[i:]))
            if entity is not None:
                return entity
        return None


def map_entity(fqdn: str, entity_map: EntityMap) -> str:
    entity = entity_map.lookup(fqdn)
    return UNKNOWN_ENTITY if entity is None else entity


# -- party -----------------------------------------------------------------

@dataclass
class AppMeta:
    app_id: str
    policy_url: str = ""
    first_party_aliases: list[str] = field(default_factory=list)
    referenced_policies: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.app_id:
            raise ValueError("AppMeta needs a package name")


def load_app_meta(path: str | Path | None) -> dict[str, AppMeta]:
    """Apps file: mapping package -> {policy_url, first_party_aliases, referenced_policies}."""
    if path is None:
        return {}
    path = Path(path)
    raw = path.read_text(encoding="utf-8")
    data = json.loads(raw) if path.suffix == ".json" else yaml.safe_load(raw)
    out = {}
    for app_id, entry in (data or {}).items():
        entry = entry or {}
        out[app_id] = AppMeta(
            app_id=app_id,
            policy_url=entry.get("policy_url") or "",
            first_party_aliases=list(entry.get("first_party_aliases") or []),
            referenced_policies=list(entry.get("referenced_policies") or []),
        )
    return out


def tokens(text: str, stoplist: Iterable[str] = DEFAULT_STOPLIST) -> set[str]:
    stop = set(stoplist)
    return {t for t in _TOKEN_SPLIT.split(text.lower()) if len(t) >= MIN_TOKEN_LEN and t not in stop}


def _cloud_subdomain(fqdn: str, cloud_suffixes: Iterable[str]) -> str | None:
    """Labels left of the most specific matching cloud suffix, or None."""
    labels = fqdn.split(".")
    best = None
    for suffix in cloud_suffixes:
        suffix = suffix.lower()
        if suffix.endswith(".*"):
            head = suffix[:-2]
            idx = [i for i, lab in enumerate(labels) if lab == head and i > 0]
            cut = idx[-1] if idx else None
        elif fqdn.endswith("." + suffix):
            cut = len(labels) - len(suffix.split("."))
        else:
            cut = None
        if cut is not None and cut > 0 and (best is None or cut < best):
            best = cut
    return None if best is None else ".".join(labels[:best])


def categorize_party(fqdn: str, meta: AppMeta, cloud_suffixes: Iterable[str] = DEFAULT_CLOUD_SUFFIXES,
                     psl: PublicSuffixList | None = None,
                     platform_keywords: Iterable[str] = DEFAULT_PLATFORM_KEYWORDS,
                     stoplist: Iterable[str] = DEFAULT_STOPLIST) -> str:
    """First, then Platform, then Third.

    First-party tokens come from the subdomain of cloud-hosted domains and
    from the eSLD otherwise; public-suffix labels are never tokens.
    """
    fqdn = fqdn.lower().rstrip(".")
    psl = psl or default_psl()
    stop = set(stoplist)
    if not is_ip(fqdn):
        sub = _cloud_subdomain(fqdn, cloud_suffixes)
        if sub is not None:
            domain_tokens = tokens(sub, stop)
        else:
            site = psl.esld(fqdn)
            suffix = psl.public_suffix(fqdn)
            domain_tokens = tokens(site, stop | set(suffix.split(".")))
        url = urlsplit(meta.policy_url if "//" in meta.policy_url else "//" + meta.policy_url)
        url_tokens = {t for t in _URL_SPLIT.split(((url.hostname or "") + " " + url.path).lower())
                      if len(t) >= MIN_TOKEN_LEN and t not in stop}
        package_tokens = tokens(meta.app_id, stop)
        if domain_tokens & (url_tokens | package_tokens):
            return FIRST
    if any(k in fqdn for k in platform_keywords):
        return PLATFORM
    return THIRD


# -- blocklists ------------------------------------------------------------

@dataclass
class Blocklist:
    name: str
    entries: frozenset[str]
    format: str = "domains"

    @classmethod
    def parse(cls, name: str, text: str, fmt: str | None = None) -> "Blocklist":
        entries = set()
        hosts_seen = False
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) >= 2 and is_ip(parts[0]):
                hosts_seen = True
                domains = parts[1:]
            else:
                domains = parts[:1]
            for d in domains:
                d = d.lower().rstrip(".")
                if d.startswith("||"):
                    d = d[2:].rstrip("^")
                if d in ("localhost", "localhost.localdomain", "broadcasthost", "0.0.0.0", "local"):
                    continue
                entries.add(d)
        return cls(name, frozenset(entries), fmt or ("hosts" if hosts_seen else "domains"))

    @classmethod
    def load(cls, name: str, path: str | Path, fmt: str | None = None) -> "Blocklist":
        return cls.parse(name, Path(path).read_text(encoding="utf-8", errors="replace"), fmt)


def match_ats(fqdn: str, esld_: str, lists: Iterable[Blocklist]) -> tuple[bool, list[str]]:
    """Check fqdn and each parent domain down to its eSLD against every list."""
    fqdn = fqdn.lower().rstrip(".")
    candidates = [fqdn]
    if not is_ip(fqdn) and fqdn.endswith("." + esld_):
        labels = fqdn.split(".")
        stop = len(esld_.split("."))
        candidates = [".".join(labels[i:]) for i in range(len(labels) - stop + 1)]
    matched = [bl.name for bl in lists if any(c in bl.entries for c in candidates)]
    return bool(matched), matched


# -- labels ----------------------------------------------------------------

@dataclass
class DestinationLabel:
    fqdn: str
    esld: str
    entity: str
    party: str
    ats: bool
    matched_lists: list[str] = field(default_factory=list)
    app_id: str = ""

    def to_json(self) -> dict:
        return {"app": self.app_id, "fqdn": self.fqdn, "esld": self.esld, "entity": self.entity,
                "party": self.party, "ats": self.ats, "matched_lists": list(self.matched_lists)}

    @classmethod
    def from_json(cls, record: dict) -> "DestinationLabel":
        return cls(record["fqdn"], record["esld"], record["entity"], record["party"],
                   bool(record["ats"]), list(record.get("matched_lists", [])), record.get("app", ""))


@dataclass
class Labeler:
    entity_map: EntityMap
    blocklists: list[Blocklist] = field(default_factory=list)
    apps: Mapping[str, AppMeta] = field(default_factory=dict)
    psl: PublicSuffixList = field(default_factory=default_psl)
    cloud_suffixes: tuple[str, ...] = DEFAULT_CLOUD_SUFFIXES
    platform_keywords: tuple[str, ...] = DEFAULT_PLATFORM_KEYWORDS
    stoplist: frozenset[str] = DEFAULT_STOPLIST

    def label(self, app_id: str, fqdn: str) -> DestinationLabel:
        site = self.psl.esld(fqdn)
        meta = self.apps.get(app_id) or AppMeta(app_id)
        party = categorize_party(fqdn, meta, self.cloud_suffixes, self.psl,
                                 self.platform_keywords, self.stoplist)
        entity = FIRST_PARTY_ENTITY if party == FIRST else map_entity(fqdn, self.entity_map)
        ats, lists = match_ats(fqdn, site, self.blocklists)
        return DestinationLabel(fqdn, site, entity, party, ats, lists, app_id)

    def label_flows(self, flows) -> list[DestinationLabel]:
        """One label per distinct (app, destination), sorted."""
        pairs = sorted({(f.app_id, f.destination_fqdn) for f in flows})
        return [self.label(app, fqdn) for app, fqdn in pairs]


def label_index(labels: Iterable[DestinationLabel]) -> dict[tuple[str, str], DestinationLabel]:
    return {(lab.app_id, lab.fqdn): lab for lab in labels}


def missed_by_blocklists(flows, labels: Iterable[DestinationLabel]) -> list[tuple[str, str, list[str]]]:
    """Third-party, non-ATS FQDNs ranked by how many distinct data types they receive.

    Rows are (fqdn, entity, sorted data types); ties break on fqdn.
    """
    index = label_index(labels)
    received: dict[str, set[str]] = defaultdict(set)
    entity_of: dict[str, str] = {}
    for flow in flows:
        lab = index.get((flow.app_id, flow.destination_fqdn))
        if lab is None or lab.party != THIRD or lab.ats:
            continue
        received[flow.destination_fqdn].add(flow.data_type)
        entity_of.setdefault(flow.destination_fqdn, lab.entity)
    rows = [(fqdn, entity_of[fqdn], sorted(types)) for fqdn, types in received.items()]
    rows.sort(key=lambda r: (-len(r[2]), r[0]))
    return rows
