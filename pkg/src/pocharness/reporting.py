"""Metric tables over episode results.

Per group: how many instances were triggered (any successful episode), how
many of those passed post-hoc validation, and the mean trace coverage of
the successful episodes' final attempts.
"""

from __future__ import annotations

import csv
import io
from collections import Counter, defaultdict
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from .run_store import ANNOTATION_CATEGORIES, FailureAnnotation
from .validation_loop import EpisodeResult

GROUP_KEYS = ("cve", "cwe", "config")
REPORT_HEADER = ("group", "total", "triggered", "posthoc_valid", "avg_coverage_pct")


@dataclass(frozen=True)
class ReportRow:
    group_key: str
    triggered: int
    posthoc_valid: int
    avg_coverage_pct: float | None
    totals: int

    def __post_init__(self) -> None:
        if not 0 <= self.posthoc_valid <= self.triggered <= self.totals:
            raise ValueError(f"inconsistent counts in report row {self.group_key!r}")


@dataclass(frozen=True)
class RunCostRecord:
    episode_ref: str
    wall_time_s: float
    attempt_count: int
    monetary_cost: float | None = None


def _group_of(ep: EpisodeResult, group_by: str) -> str:
    if group_by == "cve":
        return ep.instance_id
    if group_by == "cwe":
        return ep.cwe_id
    if group_by == "config":
        return ep.config_label
    raise ValueError(f"group_by must be one of {GROUP_KEYS}, got {group_by!r}")


def aggregate_report(episodes: Iterable[EpisodeResult], group_by: str = "config") -> list[ReportRow]:
    groups: dict[str, dict[str, list[EpisodeResult]]] = defaultdict(lambda: defaultdict(list))
    for ep in episodes:
        groups[_group_of(ep, group_by)][ep.instance_id].append(ep)

    rows = []
    for key in sorted(groups):
        instances = groups[key]
        triggered = posthoc_valid = 0
        coverages: list[Fraction] = []
        for eps in instances.values():
            wins = [e for e in eps if e.succeeded]
            if not wins:
                continue
            triggered += 1
            if any(e.posthoc is not None and e.posthoc.ground_truth_hit for e in wins):
                posthoc_valid += 1
            for e in wins:
                cov = e.final_coverage
                if cov is not None:
                    coverages.append(cov.coverage_ratio)
        # exact rational mean keeps the result independent of input order
        avg = float(100 * sum(coverages, Fraction(0)) / len(coverages)) if coverages else None
        rows.append(ReportRow(key, triggered, posthoc_valid, avg, len(instances)))
    return rows


def _fmt_pct(value: float | None) -> str:
    return "" if value is None else f"{value:.1f}"


def report_records(rows: Sequence[ReportRow]) -> list[list[str]]:
    return [
        [r.group_key, str(r.totals), str(r.triggered), str(r.posthoc_valid), _fmt_pct(r.avg_coverage_pct)]
        for r in rows
    ]


def format_delimited(header: Sequence[str], records: Sequence[Sequence[str]], delimiter: str = ",") -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(records)
    return buf.getvalue()


def format_aligned(header: Sequence[str], records: Sequence[Sequence[str]]) -> str:
    cells = [list(header)] + [[c if c != "" else "-" for c in rec] for rec in records]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = []
    for n, row in enumerate(cells):
        first = row[0].ljust(widths[0])
        rest = [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join([first, *rest]).rstrip())
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def format_report(rows: Sequence[ReportRow], fmt: str = "text") -> str:
    records = report_records(rows)
    if fmt == "csv":
        return format_delimited(REPORT_HEADER, records, ",")
    if fmt == "tsv":
        return format_delimited(REPORT_HEADER, records, "\t")
    if fmt == "text":
        return format_aligned(REPORT_HEADER, records)
    raise ValueError(f"unknown report format {fmt!r}")


# --- annotations -------------------------------------------------------------


@dataclass(frozen=True)
class AnnotationDistribution:
    counts: Mapping[str, int]
    total: int

    @property
    def invalid(self) -> int:
        return self.total - self.counts.get("valid", 0)

    @property
    def invalid_fraction(self) -> float | None:
        return self.invalid / self.total if self.total else None

    def percentages(self) -> dict[str, float]:
        return {k: 100 * v / self.total for k, v in self.counts.items()} if self.total else {}


def annotation_distribution(current: Mapping[str, FailureAnnotation]) -> AnnotationDistribution:
    counts = Counter(a.category for a in current.values())
    return AnnotationDistribution(dict(sorted(counts.items())), sum(counts.values()))


def format_distribution(dist: AnnotationDistribution, fmt: str = "text") -> str:
    header = ("category", "count", "pct")
    pct = dist.percentages()
    order = [c for c in ANNOTATION_CATEGORIES if c in dist.counts] + sorted(
        c for c in dist.counts if c not in ANNOTATION_CATEGORIES
    )
    records = [[c, str(dist.counts[c]), f"{pct[c]:.1f}"] for c in order]
    if dist.total:
        records.append(["(invalid)", str(dist.invalid), f"{100 * dist.invalid_fraction:.1f}"])
    if fmt == "text":
        return format_aligned(header, records)
    return format_delimited(header, records, "\t" if fmt == "tsv" else ",")


# --- costs -------------------------------------------------------------------


def cost_records(episodes: Iterable[EpisodeResult]) -> list[RunCostRecord]:
    out = []
    for ep in sorted(episodes, key=lambda e: e.episode_ref):
        if not ep.attempts:
            continue
        ms = 0
        cost: float | None = None
        for a in ep.attempts:
            ms += a.outcome.wall_time_ms + int(a.agent_metadata.get("latency_ms", 0))
            if a.agent_metadata.get("cost_usd") is not None:
                cost = (cost or 0.0) + float(a.agent_metadata["cost_usd"])
        out.append(RunCostRecord(ep.episode_ref, ms / 1000, len(ep.attempts), cost))
    return out


def format_costs(records: Sequence[RunCostRecord], fmt: str = "text") -> str:
    header = ("episode", "wall_time_s", "attempts", "cost_usd")
    rows = [
        [r.episode_ref, f"{r.wall_time_s:.2f}", str(r.attempt_count),
         "" if r.monetary_cost is None else f"{r.monetary_cost:.4f}"]
        for r in records
    ]
    if fmt == "text":
        return format_aligned(header, rows)
    return format_delimited(header, rows, "\t" if fmt == "tsv" else ",")
