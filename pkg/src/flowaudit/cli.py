"""Command-line entry point: run the whole audit or a single stage.

Every stage reads and writes line-delimited JSON in the output directory,
so ``flowaudit run`` and the stage subcommands invoked one after another
produce identical files.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable

import yaml

from . import sigscan
from .consistency import (DisclosureVerdict, FlowKey, PolicyChecker,
                          library_from_statements, load_statements)
from .destination import (DEFAULT_CLOUD_SUFFIXES, Blocklist, DestinationLabel, EntityMap, Labeler,
                          PublicSuffixList, label_index, load_app_meta)
from .extract import DataFlow, category_map, extract_flows, load_profile, load_rules
from .ingest import load_transactions, read_jsonl_transactions, write_jsonl_transactions, IngestStats
from .metrics import aggregate_report
from .ontology import (OntologyError, UnresolvedTerm, bundled_data_ontology,
                       bundled_entity_ontology, load_ontology)
from .purpose import PurposedFlow, PurposeTallies, attach_purposes, load_segments
from .pcapng import MalformedBlock

log = logging.getLogger("flowaudit")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3

ENV_PREFIX = "FLOWAUDIT_"
REPORT_FORMATS = ("csv", "md", "json")

TRANSACTIONS = "transactions.jsonl"
FLOWS = "flows.jsonl"
LABELS = "labels.jsonl"
VERDICTS = "verdicts.jsonl"
PURPOSES = "purposes.jsonl"
PURPOSE_TALLIES = "purpose_tallies.json"


class ConfigError(Exception):
    pass


class InputError(Exception):
    pass


# -- config ----------------------------------------------------------------

_PATH_FIELDS = ("rules", "profile", "entity_map", "data_ontology", "data_synonyms",
                "entity_ontology", "entity_synonyms", "apps", "statements", "segments",
                "policy_library", "psl")
_LIST_FIELDS = ("captures", "auto_include", "reference_entities", "cloud_suffixes",
                "report_formats")
_BOOL_FIELDS = ("first_match_only", "include_private_psl")


@dataclass
class PipelineConfig:
    captures: list[Path] = field(default_factory=list)
    output_dir: Path = Path("out")
    rules: Path | None = None
    profile: Path | None = None
    entity_map: Path | None = None
    blocklists: dict[str, Path] = field(default_factory=dict)
    data_ontology: Path | None = None
    data_synonyms: Path | None = None
    entity_ontology: Path | None = None
    entity_synonyms: Path | None = None
    apps: Path | None = None
    statements: Path | None = None
    segments: Path | None = None
    policy_library: Path | None = None
    psl: Path | None = None
    include_private_psl: bool = False
    cloud_suffixes: list[str] = field(default_factory=lambda: list(DEFAULT_CLOUD_SUFFIXES))
    auto_include: list[str] = field(default_factory=list)
    reference_entities: list[str] = field(default_factory=lambda: ["oculus", "unity"])
    first_match_only: bool = False
    report_formats: list[str] = field(default_factory=lambda: list(REPORT_FORMATS))

    def validate(self) -> None:
        missing = [str(p) for p in self.captures if not p.exists()]
        for name in _PATH_FIELDS:
            p = getattr(self, name)
            if p is not None and not p.exists():
                missing.append(f"{name}: {p}")
        missing += [f"blocklist {n}: {p}" for n, p in self.blocklists.items() if not p.exists()]
        if missing:
            raise ConfigError("missing input files: " + ", ".join(missing))
        bad = set(self.report_formats) - set(REPORT_FORMATS)
        if bad:
            raise ConfigError(f"unknown report formats: {sorted(bad)}")
        if (self.data_synonyms and not self.data_ontology) or (self.entity_synonyms and not self.entity_ontology):
            raise ConfigError("synonym files need their ontology file")


def _as_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    return str(value).strip().lower() in ("1", "true", "yes", "on")


def _as_list(value) -> list[str]:
    if value is None:
        return []
    if isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    return [str(v) for v in value]


def _env_overrides(environ) -> dict:
    known = {f.name for f in fields(PipelineConfig)}
    out = {}
    for key, value in environ.items():
        if key.startswith(ENV_PREFIX):
            name = key[len(ENV_PREFIX):].lower()
            if name in known:
                out[name] = value
    return out


def load_config(path: str | Path | None, environ=None) -> PipelineConfig:
    """Read the YAML config; relative paths are taken from the config's directory.

    ``FLOWAUDIT_<FIELD>`` variables override file values; their paths are
    relative to the working directory and list values are comma-separated.
    Blocklists in the environment use ``name=path`` pairs.
    """
    environ = os.environ if environ is None else environ
    raw: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        base = path.parent
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    cfg = PipelineConfig()
    layers = [(raw, base), (_env_overrides(environ), Path.cwd())]
    for values, root in layers:
        for name, value in values.items():
            if name in _PATH_FIELDS or name == "output_dir":
                setattr(cfg, name, None if value in (None, "") else root / str(value))
            elif name == "captures":
                cfg.captures = [root / p for p in _as_list(value)]
            elif name == "blocklists":
                if isinstance(value, str):
                    value = dict(item.split("=", 1) for item in _as_list(value))
                if not isinstance(value, dict):
                    raise ConfigError("blocklists must map list names to paths")
                cfg.blocklists = {str(k): root / str(v) for k, v in value.items()}
            elif name in _LIST_FIELDS:
                setattr(cfg, name, _as_list(value))
            elif name in _BOOL_FIELDS:
                setattr(cfg, name, _as_bool(value))
    return cfg


# -- artifact IO -----------------------------------------------------------

def write_jsonl(records: Iterable[dict], path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")


def read_jsonl(path: Path, parse: Callable[[dict], object]) -> list:
    if not path.is_file():
        raise InputError(f"{path}: no such file (run the previous stage first)")
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(parse(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from exc
    return out


# -- stages ----------------------------------------------------------------

def stage_ingest(cfg: PipelineConfig, out: Path) -> None:
    if not cfg.captures:
        raise ConfigError("no captures configured")
    txns = []
    for capture in cfg.captures:
        stats = IngestStats()
        try:
            txns += load_transactions(capture, stats=stats)
        except (OSError, MalformedBlock, ValueError) as exc:
            msg = str(exc)
            raise InputError(msg if str(capture) in msg else f"{capture}: {msg}") from exc
        log.info("%s: %d packets, %d skipped", capture, stats.packets, stats.skipped)
    write_jsonl_transactions(txns, out / TRANSACTIONS)


def _rules(cfg: PipelineConfig):
    try:
        return load_rules(cfg.rules, load_profile(cfg.profile))
    except (yaml.YAMLError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad rules or profile: {exc}") from exc


def stage_extract(cfg: PipelineConfig, out: Path) -> None:
    path = out / TRANSACTIONS
    if not path.is_file():
        raise InputError(f"{path}: no such file (run the previous stage first)")
    try:
        txns = read_jsonl_transactions(path)
    except (MalformedBlock, ValueError, KeyError) as exc:
        raise InputError(f"{path}: {exc}") from exc
    flows = extract_flows(txns, _rules(cfg))
    write_jsonl((f.to_json() for f in flows), out / FLOWS)


def _labeler(cfg: PipelineConfig) -> Labeler:
    try:
        psl = PublicSuffixList.load(cfg.psl, include_private=cfg.include_private_psl)
        return Labeler(
            entity_map=EntityMap.load(cfg.entity_map),
            blocklists=[Blocklist.load(name, p) for name, p in sorted(cfg.blocklists.items())],
            apps=load_app_meta(cfg.apps),
            psl=psl,
            cloud_suffixes=tuple(cfg.cloud_suffixes),
        )
    except (yaml.YAMLError, ValueError, KeyError) as exc:
        raise ConfigError(f"bad destination inputs: {exc}") from exc


def stage_label(cfg: PipelineConfig, out: Path) -> None:
    flows = read_jsonl(out / FLOWS, DataFlow.from_json)
    labels = _labeler(cfg).label_flows(flows)
    write_jsonl((lab.to_json() for lab in labels), out / LABELS)


def _checker(cfg: PipelineConfig) -> PolicyChecker:
    try:
        data_ont = (load_ontology(cfg.data_ontology, cfg.data_synonyms, kind="data")
                    if cfg.data_ontology else bundled_data_ontology())
        entity_ont = (load_ontology(cfg.entity_ontology, cfg.entity_synonyms, kind="entity")
                      if cfg.entity_ontology else bundled_entity_ontology())
        statements = load_statements(cfg.statements)
        library = library_from_statements(load_statements(cfg.policy_library))
        apps = load_app_meta(cfg.apps)
    except OntologyError as exc:
        raise ConfigError(f"bad ontology: {exc}") from exc
    except (yaml.YAMLError, json.JSONDecodeError, KeyError, ValueError) as exc:
        raise ConfigError(f"bad policy inputs: {exc}") from exc
    return PolicyChecker(data_ont, entity_ont, statements, apps, library, tuple(cfg.auto_include))


def stage_check(cfg: PipelineConfig, out: Path) -> None:
    flows = read_jsonl(out / FLOWS, DataFlow.from_json)
    index = label_index(read_jsonl(out / LABELS, DestinationLabel.from_json))
    checker = _checker(cfg)
    verdicts = []
    for f in flows:
        lab = index.get((f.app_id, f.destination_fqdn))
        if lab is None:
            raise InputError(f"no destination label for {f.app_id} -> {f.destination_fqdn}")
        key = FlowKey(f.data_type, lab.entity, f.app_id, f.destination_fqdn, lab.party, f.category)
        try:
            verdicts.append(checker.check(key))
        except UnresolvedTerm as exc:
            raise InputError(f"{f.app_id} -> {f.destination_fqdn}: {exc}") from exc
    write_jsonl((v.to_json() for v in verdicts), out / VERDICTS)


def stage_purpose(cfg: PipelineConfig, out: Path) -> None:
    verdicts = read_jsonl(out / VERDICTS, DisclosureVerdict.from_json)
    try:
        segments = load_segments(cfg.segments)
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise ConfigError(f"bad segments file: {exc}") from exc
    records, tallies = attach_purposes(verdicts, segments, cfg.first_match_only)
    write_jsonl((r.to_json() for r in records), out / PURPOSES)
    (out / PURPOSE_TALLIES).write_text(json.dumps(tallies.to_json(), indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")


def _read_tallies(path: Path) -> PurposeTallies | None:
    if not path.is_file():
        return None
    data = json.loads(path.read_text(encoding="utf-8"))
    return PurposeTallies(data["core"], data["unrelated"], data["unspecific_flows"],
                          Counter(data.get("by_purpose", {})), Counter(data.get("by_party", {})))


def stage_report(cfg: PipelineConfig, out: Path) -> None:
    flows = read_jsonl(out / FLOWS, DataFlow.from_json)
    labels = read_jsonl(out / LABELS, DestinationLabel.from_json)
    verdicts = read_jsonl(out / VERDICTS, DisclosureVerdict.from_json)
    purposed = read_jsonl(out / PURPOSES, PurposedFlow.from_json) if (out / PURPOSES).is_file() else None
    tallies = _read_tallies(out / PURPOSE_TALLIES)
    bundle = aggregate_report(flows, labels, verdicts, purposed, tallies, category_map(_rules(cfg)))
    bundle.write(out, cfg.report_formats)


STAGES: dict[str, Callable[[PipelineConfig, Path], None]] = {
    "ingest": stage_ingest,
    "extract": stage_extract,
    "label": stage_label,
    "check": stage_check,
    "purpose": stage_purpose,
    "report": stage_report,
}


def run_stages(cfg: PipelineConfig, names: Iterable[str]) -> int:
    try:
        cfg.validate()
        out = cfg.output_dir
        out.mkdir(parents=True, exist_ok=True)
    except ConfigError as exc:
        print(f"flowaudit: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"flowaudit: config error: output dir: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for name in names:
        try:
            STAGES[name](cfg, out)
        except ConfigError as exc:
            print(f"flowaudit: stage {name}: config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        except (InputError, OSError) as exc:
            print(f"flowaudit: stage {name}: input error: {exc}", file=sys.stderr)
            return EXIT_INPUT
    return EXIT_OK


def run_pipeline(cfg: PipelineConfig) -> int:
    return run_stages(cfg, STAGES)


# -- argument parsing ------------------------------------------------------

def _apply_overrides(cfg: PipelineConfig, args: argparse.Namespace) -> PipelineConfig:
    if getattr(args, "output_dir", None):
        cfg.output_dir = Path(args.output_dir)
    if getattr(args, "mode", None) == "reference-policies":
        cfg.auto_include = list(dict.fromkeys(cfg.auto_include + cfg.reference_entities))
    if getattr(args, "report_format", None):
        cfg.report_formats = [args.report_format]
    if getattr(args, "first_match_only", False):
        cfg.first_match_only = True
    if getattr(args, "captures", None):
        cfg.captures = [Path(p) for p in args.captures]
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowaudit",
                                     description="Audit app network traffic against privacy policies.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def stage_parser(name: str, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, help="pipeline YAML config")
        p.add_argument("--output-dir", help="artifact directory (overrides config)")
        return p

    run = stage_parser("run", "run every stage")
    ingest = stage_parser("ingest", "parse captures into transactions")
    ingest.add_argument("captures", nargs="*", help="capture files (override config)")
    stage_parser("extract", "detect data types in transactions")
    stage_parser("label", "label destinations with entity, party and ATS status")
    check = stage_parser("check", "classify flows against policy statements")
    purpose = stage_parser("purpose", "attach purposes to consistent flows")
    report = stage_parser("report", "write the aggregate report")
    for p in (run, check):
        p.add_argument("--mode", choices=("default", "reference-policies"), default="default",
                       help="reference-policies also merges the reference entities' policies")
    for p in (run, purpose):
        p.add_argument("--first-match-only", action="store_true",
                       help="use only the first matching segment per sentence")
    for p in (run, report):
        p.add_argument("--report-format", choices=REPORT_FORMATS)

    sub.add_parser("sigscan", help="byte-signature extraction and search", add_help=False)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] == "sigscan":
        return sigscan.main(argv[1:])
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _apply_overrides(load_config(args.config), args)
    except ConfigError as exc:
        print(f"flowaudit: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "run":
        return run_pipeline(cfg)
    return run_stages(cfg, [args.command])


if __name__ == "__main__":
    sys.exit(main())
