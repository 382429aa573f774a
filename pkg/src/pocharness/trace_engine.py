"""Static source-sink traces, dynamic instrumentation logs, and coverage.

Static trace format (one or more traces per file)::

    # comments and blank lines are ignored
    trace <trace_id>
    source       <class_fqn>.<method> <file>[:<line>] [| <snippet>]
    intermediate <class_fqn>.<method> <file>[:<line>] [| <snippet>]
    sink         <class_fqn>.<method> <file>[:<line>] [| <snippet>]

Dynamic event lines (everything else in a log is ignored)::

    EVT <class_fqn>.<method> <file>:<line>

``<line>`` is a decimal integer; ``0`` means unknown. Leading and trailing
whitespace around an event line is tolerated, any other text is not.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import yaml

from .errors import EmptyFile, InvariantViolation, MalformedConfig, MalformedEvent, MalformedTrace
from .locations import CodeLocation, location_tokens, match_location, split_qualified

__all__ = [
    "StepKind",
    "TraceStep",
    "StaticTrace",
    "ExecutionEvent",
    "DynamicTrace",
    "CoverageSummary",
    "LogAdapter",
    "parse_static_traces",
    "parse_static_text",
    "dump_static_traces",
    "rank_traces",
    "similarity_score",
    "format_trace_for_prompt",
    "format_step",
    "parse_dynamic_log",
    "serialize_dynamic_trace",
    "match_location",
    "coverage_summary",
    "sink_hit",
    "load_adapters",
]


class StepKind(str, Enum):
    SOURCE = "source"
    INTERMEDIATE = "intermediate"
    SINK = "sink"


@dataclass(frozen=True)
class TraceStep:
    location: CodeLocation
    kind: StepKind
    snippet: str | None = None


@dataclass(frozen=True)
class StaticTrace:
    trace_id: str
    steps: tuple[TraceStep, ...]

    def __post_init__(self) -> None:
        check_trace(self)

    @property
    def source(self) -> TraceStep:
        return self.steps[0]

    @property
    def sink(self) -> TraceStep:
        return self.steps[-1]


def check_trace(trace: StaticTrace) -> None:
    steps = trace.steps
    if len(steps) < 2:
        raise InvariantViolation("a trace needs at least a source and a sink step", trace.trace_id)
    last = len(steps) - 1
    for i, step in enumerate(steps):
        expected = StepKind.SOURCE if i == 0 else StepKind.SINK if i == last else StepKind.INTERMEDIATE
        if step.kind is not expected:
            raise InvariantViolation(
                f"step {i} has kind {step.kind.value}, expected {expected.value}", trace.trace_id
            )
        if not step.location.method or not step.location.file:
            raise InvariantViolation(f"step {i} lacks a file or method", trace.trace_id)


@dataclass(frozen=True)
class ExecutionEvent:
    location: CodeLocation
    sequence: int


@dataclass(frozen=True)
class DynamicTrace:
    events: tuple[ExecutionEvent, ...] = ()

    def __post_init__(self) -> None:
        for prev, cur in zip(self.events, self.events[1:]):
            if cur.sequence <= prev.sequence:
                raise ValueError("event sequence numbers must be strictly increasing")

    def __len__(self) -> int:
        return len(self.events)


@dataclass(frozen=True)
class CoverageSummary:
    source_hit: bool
    sink_hit: bool
    steps_executed: int
    steps_total: int
    executed_steps: tuple[int, ...] = ()

    @property
    def coverage_ratio(self) -> Fraction:
        return Fraction(self.steps_executed, self.steps_total)

    @property
    def coverage(self) -> float:
        return self.steps_executed / self.steps_total

    def to_dict(self) -> dict:
        return {
            "source_hit": self.source_hit,
            "sink_hit": self.sink_hit,
            "steps_executed": self.steps_executed,
            "steps_total": self.steps_total,
            "executed_steps": list(self.executed_steps),
            "coverage": self.coverage,
        }

    @classmethod
    def from_dict(cls, data: dict) -> CoverageSummary:
        return cls(
            source_hit=bool(data["source_hit"]),
            sink_hit=bool(data["sink_hit"]),
            steps_executed=int(data["steps_executed"]),
            steps_total=int(data["steps_total"]),
            executed_steps=tuple(data.get("executed_steps", ())),
        )


# --- static traces ---------------------------------------------------------

_TRACE_HEADER = re.compile(r"^trace\s+(\S+)\s*$")
_STEP_LINE = re.compile(
    r"^(?P<kind>source|intermediate|sink)\s+(?P<name>\S+)\s+(?P<file>\S+?)(?::(?P<line>\d+))?"
    r"(?:\s+\|\s?(?P<snippet>.*))?$"
)


def _location_from(name: str, file: str, line: str | None) -> CodeLocation:
    cls, method = split_qualified(name)
    num = int(line) if line else 0
    return CodeLocation(file=file, class_fqn=cls, method=method, line=num or None)


def parse_static_text(text: str) -> list[StaticTrace]:
    traces: list[StaticTrace] = []
    seen: set[str] = set()
    current_id: str | None = None
    current_steps: list[TraceStep] = []

    def close() -> None:
        if current_id is None:
            return
        traces.append(StaticTrace(current_id, tuple(current_steps)))

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        header = _TRACE_HEADER.match(line)
        if header:
            close()
            current_id = header.group(1)
            if current_id in seen:
                raise InvariantViolation("duplicate trace id", current_id)
            seen.add(current_id)
            current_steps = []
            continue
        m = _STEP_LINE.match(line)
        if m is None:
            raise MalformedTrace(f"unrecognized record: {line[:60]!r}", lineno)
        if current_id is None:
            raise MalformedTrace("step record before any 'trace' header", lineno)
        loc = _location_from(m["name"], m["file"], m["line"])
        if not loc.method:
            raise MalformedTrace(f"missing method name in {m['name']!r}", lineno)
        snippet = m["snippet"].strip() if m["snippet"] else None
        current_steps.append(TraceStep(loc, StepKind(m["kind"]), snippet or None))
    close()
    if not traces:
        raise EmptyFile("trace file contains no traces")
    return traces


def parse_static_traces(file: str | Path) -> list[StaticTrace]:
    path = Path(file)
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        raise EmptyFile(f"{path} is empty")
    return parse_static_text(text)


def dump_static_traces(traces: Iterable[StaticTrace]) -> str:
    out: list[str] = []
    for trace in traces:
        out.append(f"trace {trace.trace_id}")
        width = max(len(s.kind.value) for s in trace.steps)
        for step in trace.steps:
            loc = step.location
            rec = f"{step.kind.value.ljust(width)} {loc.qualified_name()} {loc.file_ref()}"
            if step.snippet:
                rec += f" | {step.snippet}"
            out.append(rec)
        out.append("")
    return "\n".join(out)


# --- ranking ---------------------------------------------------------------


def similarity_score(trace: StaticTrace, hints: Sequence[CodeLocation]) -> int:
    """Largest token overlap between any hint and any step of ``trace``."""
    best = 0
    step_tokens = [location_tokens(s.location) for s in trace.steps]
    for hint in hints:
        ht = location_tokens(hint)
        for st in step_tokens:
            best = max(best, len(ht & st))
    return best


def rank_traces(traces: Sequence[StaticTrace], hints: Sequence[CodeLocation], k: int = 5) -> list[StaticTrace]:
    if k < 1:
        raise ValueError("k must be positive")
    if not hints:
        return list(traces[:k])
    scored = sorted(
        range(len(traces)), key=lambda i: (-similarity_score(traces[i], hints), i)
    )
    return [traces[i] for i in scored[:k]]


# --- prompt formatting -----------------------------------------------------


def format_step(index: int, step: TraceStep) -> str:
    loc = step.location
    line = f"[{index}] {step.kind.value.upper()} {loc.file_ref()} {loc.qualified_name()}"
    if step.snippet:
        line += f" | {step.snippet}"
    return line


def format_trace_for_prompt(trace: StaticTrace) -> str:
    lines = [f"Trace {trace.trace_id} ({len(trace.steps)} steps, source first, sink last):"]
    lines.extend(format_step(i, s) for i, s in enumerate(trace.steps))
    return "\n".join(lines)


# --- dynamic logs ----------------------------------------------------------

_EVT_LINE = re.compile(r"^EVT (?P<name>\S+) (?P<file>\S+):(?P<line>\d+)$")


def parse_dynamic_log(log_text: str, *, strict: bool = False) -> DynamicTrace:
    """Extract instrumentation events, skipping interleaved program output.

    In strict mode a line that starts with ``EVT`` but does not follow the
    grammar raises :class:`MalformedEvent` instead of being skipped.
    """
    events: list[ExecutionEvent] = []
    for lineno, raw in enumerate(log_text.splitlines(), start=1):
        line = raw.strip()
        m = _EVT_LINE.match(line)
        if m is None:
            if strict and line.startswith("EVT"):
                raise MalformedEvent(f"bad event line {line[:60]!r}", lineno)
            continue
        loc = _location_from(m["name"], m["file"], m["line"])
        if not loc.method:
            if strict:
                raise MalformedEvent(f"missing method in {m['name']!r}", lineno)
            continue
        events.append(ExecutionEvent(loc, len(events)))
    return DynamicTrace(tuple(events))


def serialize_dynamic_trace(dyn: DynamicTrace) -> str:
    return "".join(
        f"EVT {e.location.qualified_name()} {e.location.file}:{e.location.line or 0}\n" for e in dyn.events
    )


@dataclass(frozen=True)
class LogAdapter:
    """Rewrites one foreign log line shape into canonical EVT lines.

    ``pattern`` must define the named groups ``method`` and ``file`` and may
    define ``class`` and ``line``.
    """

    pattern: re.Pattern

    @classmethod
    def compile(cls, pattern: str) -> LogAdapter:
        try:
            rx = re.compile(pattern)
        except re.error as exc:
            raise MalformedConfig(f"bad adapter pattern {pattern!r}: {exc}") from exc
        missing = {"method", "file"} - set(rx.groupindex)
        if missing:
            raise MalformedConfig(f"adapter pattern lacks groups {sorted(missing)}")
        return cls(rx)

    def convert_line(self, line: str) -> str | None:
        m = self.pattern.search(line)
        if m is None:
            return None
        groups = m.groupdict()
        cls = groups.get("class") or ""
        name = f"{cls}.{groups['method']}" if cls else groups["method"]
        return f"EVT {name} {groups['file']}:{groups.get('line') or 0}"


def convert_log(text: str, adapters: Sequence[LogAdapter]) -> str:
    """Apply adapters line by line; the first adapter that matches wins."""
    out = []
    for line in text.splitlines():
        for adapter in adapters:
            converted = adapter.convert_line(line)
            if converted is not None:
                out.append(converted)
                break
        else:
            out.append(line)
    return "\n".join(out)


def load_adapters(path: str | Path) -> list[LogAdapter]:
    """Read an adapter config: ``adapters: [{pattern: <regex>}, ...]``."""
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise MalformedConfig(f"adapter config {path}: {exc}") from exc
    entries = data.get("adapters") if isinstance(data, dict) else None
    if not isinstance(entries, list):
        raise MalformedConfig(f"adapter config {path}: expected an 'adapters' list")
    return [LogAdapter.compile(str(e["pattern"])) for e in entries if isinstance(e, dict) and "pattern" in e]


# --- coverage --------------------------------------------------------------


def coverage_summary(trace: StaticTrace, dyn: DynamicTrace) -> CoverageSummary:
    executed = tuple(
        i
        for i, step in enumerate(trace.steps)
        if any(match_location(step.location, e.location) for e in dyn.events)
    )
    last = len(trace.steps) - 1
    return CoverageSummary(
        source_hit=0 in executed,
        sink_hit=last in executed,
        steps_executed=len(executed),
        steps_total=len(trace.steps),
        executed_steps=executed,
    )


def sink_hit(trace: StaticTrace, dyn: DynamicTrace) -> bool:
    return coverage_summary(trace, dyn).sink_hit


def format_coverage(trace: StaticTrace, summary: CoverageSummary) -> str:
    pct = 100 * summary.coverage
    lines = [
        f"Trace coverage for {trace.trace_id}: {summary.steps_executed}/{summary.steps_total} steps executed ({pct:.1f}%)",
        f"Source hit: {'yes' if summary.source_hit else 'no'}",
        f"Sink hit: {'yes' if summary.sink_hit else 'no'}",
    ]
    executed = set(summary.executed_steps)
    for i, step in enumerate(trace.steps):
        mark = "x" if i in executed else " "
        lines.append(f"  [{mark}] step {i} {step.kind.value} {step.location.qualified_name()}")
    return "\n".join(lines)
