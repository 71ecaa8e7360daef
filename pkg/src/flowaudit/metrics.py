"""Classification metrics and the aggregate audit report."""

from __future__ import annotations

import csv
import io
import json
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .consistency import CLASSES, DisclosureVerdict, summarize
from .destination import FIRST, PARTIES, PLATFORM, THIRD, DestinationLabel, label_index
from .extract import DataFlow

MICRO_TOLERANCE = 1e-12


@dataclass
class ConfusionMatrix:
    """Rows are gold labels, columns are predictions."""

    labels: list[str]
    counts: list[list[int]]

    def __post_init__(self):
        n = len(self.labels)
        if len(self.counts) != n or any(len(row) != n for row in self.counts):
            raise ValueError("confusion matrix must be square and match its labels")
        if any(c < 0 for row in self.counts for c in row):
            raise ValueError("confusion matrix counts must be non-negative")

    @classmethod
    def from_pairs(cls, gold: Iterable[str], pred: Iterable[str],
                   labels: Sequence[str] | None = None) -> "ConfusionMatrix":
        gold, pred = list(gold), list(pred)
        labels = list(labels) if labels is not None else sorted(set(gold) | set(pred))
        pos = {lab: i for i, lab in enumerate(labels)}
        counts = [[0] * len(labels) for _ in labels]
        for g, p in zip(gold, pred, strict=True):
            counts[pos[g]][pos[p]] += 1
        return cls(labels, counts)

    def tp(self, i: int) -> int:
        return self.counts[i][i]

    def support(self, i: int) -> int:
        return sum(self.counts[i])

    def predicted(self, i: int) -> int:
        return sum(row[i] for row in self.counts)

    @property
    def total(self) -> int:
        return sum(map(sum, self.counts))

    def fold(self, mapping: Mapping[str, str]) -> "ConfusionMatrix":
        """Merge labels, e.g. omitted+incorrect into inconsistent. Unmapped labels stay."""
        new_labels: list[str] = []
        for lab in self.labels:
            target = mapping.get(lab, lab)
            if target not in new_labels:
                new_labels.append(target)
        pos = {lab: new_labels.index(mapping.get(lab, lab)) for lab in self.labels}
        counts = [[0] * len(new_labels) for _ in new_labels]
        for i, gi in enumerate(self.labels):
            for j, pj in enumerate(self.labels):
                counts[pos[gi]][pos[pj]] += self.counts[i][j]
        return ConfusionMatrix(new_labels, counts)


@dataclass
class MetricRow:
    label: str
    precision: float | None
    recall: float | None
    f1: float | None
    support: int


def harmonic(p: float | None, r: float | None) -> float | None:
    if p is None or r is None:
        return None
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def per_class_metrics(cm: ConfusionMatrix) -> list[MetricRow]:
    rows = []
    for i, label in enumerate(cm.labels):
        pred, sup = cm.predicted(i), cm.support(i)
        p = cm.tp(i) / pred if pred else None
        r = cm.tp(i) / sup if sup else None
        rows.append(MetricRow(label, p, r, harmonic(p, r), sup))
    return rows


def micro(cm: ConfusionMatrix) -> tuple[float, float, float]:
    """Pooled precision, recall and F1; identical for single-label data."""
    tp = sum(cm.tp(i) for i in range(len(cm.labels)))
    fp = sum(cm.predicted(i) - cm.tp(i) for i in range(len(cm.labels)))
    fn = sum(cm.support(i) - cm.tp(i) for i in range(len(cm.labels)))
    if tp + fp == 0 or tp + fn == 0:
        raise ValueError("micro averages need at least one sample")
    p = tp / (tp + fp)
    r = tp / (tp + fn)
    f1 = harmonic(p, r)
    assert abs(p - r) <= MICRO_TOLERANCE and abs(p - f1) <= MICRO_TOLERANCE, (p, r, f1)
    return p, r, f1


def macro(rows: Sequence[MetricRow], f1_mode: str = "harmonic") -> tuple[float, float, float]:
    """Unweighted mean of per-class precision and recall.

    ``f1_mode="harmonic"`` takes the harmonic mean of macro precision and
    macro recall; ``"mean"`` averages the per-class F1 scores instead.
    Classes with an undefined value are left out of that mean.
    """
    if not rows:
        raise ValueError("macro averages need at least one class")

    def mean(values: list[float | None], what: str) -> float:
        defined = [v for v in values if v is not None]
        if len(defined) < len(values):
            warnings.warn(f"{len(values) - len(defined)} class(es) with undefined {what} excluded",
                          RuntimeWarning, stacklevel=3)
        if not defined:
            raise ValueError(f"no class has a defined {what}")
        return sum(defined) / len(defined)

    p = mean([r.precision for r in rows], "precision")
    r = mean([r.recall for r in rows], "recall")
    if f1_mode == "harmonic":
        f1 = harmonic(p, r)
    elif f1_mode == "mean":
        f1 = mean([row.f1 for row in rows], "f1")
    else:
        raise ValueError(f"unknown f1_mode {f1_mode!r}")
    return p, r, f1


# -- report ----------------------------------------------------------------

@dataclass
class ReportBundle:
    csv: str
    markdown: str
    histogram: dict[str, int]
    summary: dict = field(default_factory=dict)

    def write(self, out_dir: str | Path, formats: Iterable[str] = ("csv", "md", "json")) -> list[Path]:
        out_dir = Path(out_dir)
        formats = set(formats)
        written = []
        if "csv" in formats:
            written.append(out_dir / "report.csv")
            written[-1].write_text(self.csv, encoding="utf-8", newline="")
        if "md" in formats:
            written.append(out_dir / "report.md")
            written[-1].write_text(self.markdown, encoding="utf-8")
        if "json" in formats:
            written.append(out_dir / "verdict_histogram.json")
            written[-1].write_text(json.dumps(self.histogram, indent=2, sort_keys=False) + "\n",
                                   encoding="utf-8")
        return written


def _pct(blocked: int, total: int) -> float:
    return 100.0 * blocked / total if total else 0.0


def _md_table(header: list[str], rows: list[list[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(row) + " |" for row in rows]
    return "\n".join(lines)


def aggregate_report(flows: Sequence[DataFlow], labels: Iterable[DestinationLabel],
                     verdicts: Sequence[DisclosureVerdict], purposed=None, tallies=None,
                     categories: Mapping[str, str] | None = None) -> ReportBundle:
    """Data-type x party exposure table, disclosure counts and purpose tallies.

    Each exposure cell holds unique apps, unique FQDNs and the share of
    those FQDNs on a blocklist. Totals are computed over unique sets, not
    by summing cells.
    """
    index = label_index(labels)
    categories = dict(categories or {})
    for f in flows:
        if f.category:
            categories.setdefault(f.data_type, f.category)
    apps: dict[tuple[str, str], set[str]] = defaultdict(set)
    fqdns: dict[tuple[str, str], set[str]] = defaultdict(set)
    ats_fqdns: set[str] = set()
    for f in flows:
        lab = index.get((f.app_id, f.destination_fqdn))
        party = lab.party if lab else THIRD
        for dt in (f.data_type, None):
            apps[(dt, party)].add(f.app_id)
            fqdns[(dt, party)].add(f.destination_fqdn)
        if lab and lab.ats:
            ats_fqdns.add(f.destination_fqdn)

    cat_order = {"PII": 0, "Fingerprint": 1, "VRSensoryData": 2}
    data_types = sorted({f.data_type for f in flows},
                        key=lambda dt: (cat_order.get(categories.get(dt, ""), 3), dt))

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["section", "key", "category", "party", "apps", "fqdns", "pct_blocked"])
    md_rows = []
    for dt in data_types + [None]:
        cells = []
        for party in PARTIES:
            a = len(apps.get((dt, party), ()))
            fq = fqdns.get((dt, party), set())
            blocked = len(fq & ats_fqdns)
            if a or fq:
                writer.writerow(["exposure", dt or "TOTAL", categories.get(dt, "") if dt else "",
                                 party, a, len(fq), repr(_pct(blocked, len(fq)))])
                cells.append(f"{a}/{len(fq)}/{_pct(blocked, len(fq)):.0f}%")
            else:
                cells.append("-")
        if dt is not None or flows:
            md_rows.append([dt or "**Total**", categories.get(dt, "") if dt else ""] + cells)

    totals = summarize(verdicts)
    hist = totals.histogram()
    for cls in CLASSES:
        if hist[cls]:
            writer.writerow(["disclosure", cls, "", "", hist[cls], "", ""])
    cat_rows, ent_rows = [], []
    for cat, counter in totals.by_category.items():
        for cls in CLASSES:
            if counter.get(cls):
                writer.writerow(["disclosure_by_category", cls, cat, "", counter[cls], "", ""])
        cat_rows.append([cat] + [str(counter.get(c, 0)) for c in CLASSES])
    for ent, counter in totals.by_entity.items():
        for cls in CLASSES:
            if counter.get(cls):
                writer.writerow(["disclosure_by_entity", cls, ent, "", counter[cls], "", ""])
        ent_rows.append([ent] + [str(counter.get(c, 0)) for c in CLASSES])

    purpose_rows = []
    if tallies is not None and (tallies.records or tallies.unspecific):
        for purpose, n in sorted(tallies.by_purpose.items()):
            writer.writerow(["purpose", purpose, "", "", n, "", ""])
            purpose_rows.append([purpose, str(n)])
        writer.writerow(["purpose_class", "Core", "", "", tallies.core, "", ""])
        writer.writerow(["purpose_class", "Unrelated", "", "", tallies.unrelated, "", ""])
        writer.writerow(["purpose_class", "unspecific_flows", "", "", tallies.unspecific, "", ""])

    md = ["# Privacy audit report", "",
          "## Data types by destination party", "",
          "Cells: apps / FQDNs / % of those FQDNs blocked.", "",
          _md_table(["Data type", "Category", FIRST, THIRD, PLATFORM], md_rows), "",
          "## Disclosures", "",
          _md_table(["Class", "Flows"], [[c, str(hist[c])] for c in CLASSES]), "",
          f"Consistent: {totals.consistent}, inconsistent: {totals.inconsistent}.", "",
          "### By data-type category", "",
          _md_table(["Category"] + list(CLASSES), cat_rows), "",
          "### By entity", "",
          _md_table(["Entity"] + list(CLASSES), ent_rows), ""]
    if tallies is not None:
        md += ["## Purposes", "",
               _md_table(["Purpose", "Flows"], purpose_rows), "",
               f"Core: {tallies.core}, unrelated: {tallies.unrelated}, "
               f"unspecific-only flows: {tallies.unspecific}.", ""]
    summary = {"consistent": totals.consistent, "inconsistent": totals.inconsistent,
               "flows": len(flows)}
    return ReportBundle(buf.getvalue(), "\n".join(md), hist, summary)
