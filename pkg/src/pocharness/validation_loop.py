"""Validity predicate, feedback, the generate-validate loop, post-hoc checks.

A candidate is valid when it exits with status 0, prints the success
marker, and (with a trace) executes the trace's sink. In no-trace mode the
sink condition is not applicable and drops out of the conjunction.
"""

from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Sequence

from .agent_gateway import (
    AgentBackend,
    AgentRequest,
    generate_candidate,
    rank_traces_via_agent,
)
from .errors import CalledOnValidVerdict, EpisodeNotSuccessful, HarnessError, NoGroundTruth
from .exec_runner import RunOutcome, run_candidate
from .instance_model import ProblemInstance, RunConfig
from .locations import CodeLocation, match_location
from .prompt_builder import TemplateSet, build_main_prompt, load_cwe_criteria
from .trace_engine import CoverageSummary, StaticTrace, coverage_summary, format_coverage, rank_traces

log = logging.getLogger(__name__)

NO_TRACE = "no_trace"
MULTI_TRACE = "multi_trace"


@dataclass(frozen=True)
class ValidationVerdict:
    exited_ok: bool
    marker_found: bool
    sink_reached: bool | None  # None: not applicable (no-trace mode)
    coverage: CoverageSummary | None = None

    @property
    def valid(self) -> bool:
        return self.exited_ok and self.marker_found and self.sink_reached is not False

    def to_dict(self) -> dict:
        return {
            "exited_ok": self.exited_ok,
            "marker_found": self.marker_found,
            "sink_reached": "not_applicable" if self.sink_reached is None else self.sink_reached,
            "valid": self.valid,
            "coverage": self.coverage.to_dict() if self.coverage else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> ValidationVerdict:
        sink = data["sink_reached"]
        return cls(
            exited_ok=bool(data["exited_ok"]),
            marker_found=bool(data["marker_found"]),
            sink_reached=None if sink == "not_applicable" else bool(sink),
            coverage=CoverageSummary.from_dict(data["coverage"]) if data.get("coverage") else None,
        )


@dataclass(frozen=True)
class AttemptRecord:
    attempt_index: int
    candidate_digest: str
    prompt_digest: str
    outcome: RunOutcome
    verdict: ValidationVerdict
    feedback_issued: str | None = None
    agent_metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "attempt_index": self.attempt_index,
            "candidate_digest": self.candidate_digest,
            "prompt_digest": self.prompt_digest,
            "agent_metadata": dict(self.agent_metadata),
            "outcome": self.outcome.to_dict(),
            "verdict": self.verdict.to_dict(),
            "feedback_issued": self.feedback_issued,
        }

    @classmethod
    def from_dict(cls, data: dict) -> AttemptRecord:
        return cls(
            attempt_index=int(data["attempt_index"]),
            candidate_digest=data["candidate_digest"],
            prompt_digest=data.get("prompt_digest", ""),
            outcome=RunOutcome.from_dict(data["outcome"]),
            verdict=ValidationVerdict.from_dict(data["verdict"]),
            feedback_issued=data.get("feedback_issued"),
            agent_metadata=dict(data.get("agent_metadata") or {}),
        )


@dataclass(frozen=True)
class PostHocVerdict:
    matched_locations: tuple[CodeLocation, ...]
    # sequence number of the first dynamic event matching each location
    matched_events: tuple[int, ...] = ()

    @property
    def ground_truth_hit(self) -> bool:
        return bool(self.matched_locations)

    def to_dict(self) -> dict:
        return {
            "ground_truth_hit": self.ground_truth_hit,
            "matched_locations": [loc.to_dict() for loc in self.matched_locations],
            "matched_events": list(self.matched_events),
        }

    @classmethod
    def from_dict(cls, data: dict) -> PostHocVerdict:
        return cls(
            tuple(CodeLocation.from_dict(d) for d in data.get("matched_locations", [])),
            tuple(int(s) for s in data.get("matched_events", [])),
        )


@dataclass(frozen=True)
class EpisodeResult:
    instance_id: str
    cwe_id: str
    mode: str
    config_label: str
    trace_id: str | None
    attempts: tuple[AttemptRecord, ...]
    budget: int
    trace_steps: int | None = None
    posthoc: PostHocVerdict | None = None
    error: str | None = None
    started_at: str = ""
    finished_at: str = ""

    def __post_init__(self) -> None:
        if len(self.attempts) > self.budget:
            raise ValueError("episode exceeds its attempt budget")
        for i, a in enumerate(self.attempts):
            if a.attempt_index != i:
                raise ValueError("attempt indices must be contiguous from 0")
            if a.verdict.valid and i != len(self.attempts) - 1:
                raise ValueError("no attempt may follow a valid attempt")

    @property
    def succeeded(self) -> bool:
        return bool(self.attempts) and self.attempts[-1].verdict.valid

    @property
    def episode_ref(self) -> str:
        return episode_ref(self.instance_id, self.trace_id, self.config_label)

    @property
    def final_coverage(self) -> CoverageSummary | None:
        return self.attempts[-1].verdict.coverage if self.attempts else None

    def to_dict(self) -> dict:
        return {
            "episode_ref": self.episode_ref,
            "instance_id": self.instance_id,
            "cwe_id": self.cwe_id,
            "mode": self.mode,
            "config_label": self.config_label,
            "trace_id": self.trace_id,
            "trace_steps": self.trace_steps,
            "budget": self.budget,
            "succeeded": self.succeeded,
            "error": self.error,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "attempts": [a.to_dict() for a in self.attempts],
            "posthoc": self.posthoc.to_dict() if self.posthoc else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> EpisodeResult:
        return cls(
            instance_id=data["instance_id"],
            cwe_id=data["cwe_id"],
            mode=data["mode"],
            config_label=data["config_label"],
            trace_id=data.get("trace_id"),
            attempts=tuple(AttemptRecord.from_dict(a) for a in data.get("attempts", [])),
            budget=int(data["budget"]),
            trace_steps=data.get("trace_steps"),
            posthoc=PostHocVerdict.from_dict(data["posthoc"]) if data.get("posthoc") else None,
            error=data.get("error"),
            started_at=data.get("started_at", ""),
            finished_at=data.get("finished_at", ""),
        )


def episode_ref(instance_id: str, trace_id: str | None, config_label: str = "") -> str:
    raw = f"{instance_id}__{trace_id or NO_TRACE}"
    if config_label:
        raw += f"__{config_label}"
    return re.sub(r"[^A-Za-z0-9._-]+", "_", raw)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def validate(outcome: RunOutcome, trace: StaticTrace | None, config: RunConfig) -> ValidationVerdict:
    if trace is None and config.mode == MULTI_TRACE:
        raise ValueError("multi-trace validation needs the selected trace")
    exited_ok = outcome.exit_code == 0 and not outcome.timed_out
    marker_found = config.marker in outcome.output
    if trace is None:
        return ValidationVerdict(exited_ok, marker_found, None)
    cov = coverage_summary(trace, outcome.dynamic_trace)
    return ValidationVerdict(exited_ok, marker_found, cov.sink_hit, cov)


def _excerpt(output: str, cap: int) -> str:
    data = output.encode("utf-8")
    if len(data) <= cap:
        return output
    return data[:cap].decode("utf-8", errors="ignore") + f"\n[... {len(data) - cap} more bytes omitted ...]"


def make_feedback(
    verdict: ValidationVerdict,
    outcome: RunOutcome,
    trace: StaticTrace | None,
    *,
    marker: str = "[VULN]",
    output_cap: int = 4000,
) -> str:
    if verdict.valid:
        raise CalledOnValidVerdict("feedback is only produced for rejected candidates")
    failures: list[str] = []
    if outcome.timed_out:
        failures.append("The PoC did not finish within the time limit and was killed.")
    elif not verdict.exited_ok:
        failures.append(
            f"The PoC exited with status {outcome.exit_code}; it must compile, run, and exit with status 0."
        )
    if not verdict.marker_found:
        failures.append(f"The output does not contain the success marker {marker}.")
    if verdict.sink_reached is False and trace is not None:
        sink = trace.sink.location
        failures.append(
            f"The sink of trace {trace.trace_id} was not executed: {sink.qualified_name()} at {sink.file_ref()}. "
            "Drive the exploit through the project code so that this method runs."
        )

    parts = ["Failed checks:"]
    parts.extend(f"- {f}" for f in failures)
    parts.append("")
    parts.append("Output of the previous PoC run:")
    parts.append("```")
    parts.append(_excerpt(outcome.output, output_cap).rstrip("\n") or "(no output)")
    parts.append("```")
    if trace is not None and verdict.coverage is not None:
        parts.append("")
        parts.append(format_coverage(trace, verdict.coverage))
    return "\n".join(parts)


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


AttemptHook = Callable[[str, int, str, str], None]


def run_episode(
    instance: ProblemInstance,
    trace: StaticTrace | None,
    backend: AgentBackend,
    config: RunConfig,
    *,
    templates: TemplateSet | None = None,
    on_attempt: AttemptHook | None = None,
) -> EpisodeResult:
    """Generate and validate candidates until one is valid or the budget runs out.

    ``on_attempt(episode_ref, attempt_index, prompt_text, source_text)`` is
    called for each attempt, e.g. to archive prompts and PoCs.
    """
    if config.budget < 1:
        raise ValueError("budget must be at least 1")
    mode = NO_TRACE if trace is None else MULTI_TRACE
    ref = episode_ref(instance.id, trace.trace_id if trace else None, config.config_label)
    session_id = episode_ref(instance.id, trace.trace_id if trace else None)
    criteria = load_cwe_criteria(instance.cwe_id, templates)
    started = _now()
    attempts: list[AttemptRecord] = []
    feedback: str | None = None
    for n in range(config.budget):
        prompt = build_main_prompt(instance, trace, criteria, feedback, config=config, templates=templates)
        candidate = generate_candidate(backend, AgentRequest(prompt, n, session_id))
        if on_attempt:
            on_attempt(ref, n, prompt.text, candidate.source_text)
        outcome = run_candidate(instance, candidate, config)
        verdict = validate(outcome, trace, config)
        last = n == config.budget - 1
        feedback = None
        if not verdict.valid and not last:
            feedback = make_feedback(verdict, outcome, trace, marker=config.marker,
                                     output_cap=config.feedback_output_cap)
        attempts.append(
            AttemptRecord(n, _digest(candidate.source_text), prompt.inputs_digest, outcome, verdict, feedback,
                          dict(candidate.agent_metadata))
        )
        log.info("%s attempt %d: valid=%s", ref, n, verdict.valid)
        if verdict.valid:
            break
    return EpisodeResult(
        instance_id=instance.id,
        cwe_id=instance.cwe_id,
        mode=mode,
        config_label=config.config_label,
        trace_id=trace.trace_id if trace else None,
        attempts=tuple(attempts),
        budget=config.budget,
        trace_steps=len(trace.steps) if trace else None,
        started_at=started,
        finished_at=_now(),
    )


def select_traces(instance: ProblemInstance, backend: AgentBackend | None, config: RunConfig) -> list[StaticTrace]:
    traces = list(instance.traces)
    if not traces:
        return []
    if config.trace_ranking == "agent" and backend is not None:
        ranking = rank_traces_via_agent(backend, instance, traces)
        by_id = {t.trace_id: t for t in traces}
        return [by_id[i] for i in ranking.trace_ids[: config.top_k]]
    return rank_traces(traces, list(instance.location_hints), config.top_k)


def _failed_episode(instance: ProblemInstance, trace: StaticTrace | None, config: RunConfig, error: str) -> EpisodeResult:
    now = _now()
    return EpisodeResult(
        instance_id=instance.id,
        cwe_id=instance.cwe_id,
        mode=config.mode,
        config_label=config.config_label,
        trace_id=trace.trace_id if trace else None,
        attempts=(),
        budget=config.budget,
        trace_steps=len(trace.steps) if trace else None,
        error=error,
        started_at=now,
        finished_at=now,
    )


def run_instance(
    instance: ProblemInstance,
    backend: AgentBackend,
    config: RunConfig,
    *,
    templates: TemplateSet | None = None,
    on_attempt: AttemptHook | None = None,
    on_episode: Callable[[EpisodeResult], None] | None = None,
) -> list[EpisodeResult]:
    """All episodes for one instance: one without a trace, or one per selected trace.

    A failing episode is recorded with its error and does not stop the rest.
    """
    if config.mode == NO_TRACE:
        plan: list[StaticTrace | None] = [None]
    else:
        plan = list(select_traces(instance, backend, config))
        if not plan:
            result = _failed_episode(instance, None, config, "no static traces available")
            if on_episode:
                on_episode(result)
            return [result]

    results: list[EpisodeResult] = []
    for trace in plan:
        try:
            result = run_episode(instance, trace, backend, config, templates=templates, on_attempt=on_attempt)
        except HarnessError as exc:
            log.error("episode %s/%s failed: %s", instance.id, trace.trace_id if trace else NO_TRACE, exc)
            result = _failed_episode(instance, trace, config, f"{type(exc).__name__}: {exc}")
        results.append(result)
        if on_episode:
            on_episode(result)
        if config.stop_early and result.succeeded:
            break
    return results


def instance_succeeded(episodes: Sequence[EpisodeResult]) -> bool:
    return any(e.succeeded for e in episodes)


def posthoc_validate(episode: EpisodeResult, ground_truth: Sequence[CodeLocation]) -> PostHocVerdict:
    """Does the successful attempt's dynamic trace execute a ground-truth location?"""
    if not episode.succeeded:
        raise EpisodeNotSuccessful(f"episode {episode.episode_ref} did not succeed")
    if not ground_truth:
        raise NoGroundTruth(f"no ground-truth locations for {episode.instance_id}")
    events = episode.attempts[-1].outcome.dynamic_trace.events
    matched: list[CodeLocation] = []
    evidence: list[int] = []
    for loc in ground_truth:
        hit = next((e for e in events if match_location(loc, e.location)), None)
        if hit is not None:
            matched.append(loc)
            evidence.append(hit.sequence)
    return PostHocVerdict(tuple(matched), tuple(evidence))
