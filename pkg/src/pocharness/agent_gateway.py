"""Agent backends: scripted replay for offline runs and a remote chat API.

Scripted fixtures are laid out as ``<script_dir>/<session_id>/attempt_<n>.txt``
and returned verbatim. Remote replies go through :func:`extract_source`.

Every call is appended to the session log (JSON lines) with the prompt
digest, latency and token counts. Credentials are read from the environment
at call time and never written anywhere.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Mapping, Protocol, Sequence

import httpx

from .errors import BackendUnavailable, FixtureMissing, MalformedConfig, MalformedResponse
from .instance_model import CREDENTIAL_ENV, AgentBackendDescriptor, ProblemInstance
from .locations import CodeLocation, split_qualified
from .prompt_builder import (
    PromptBundle,
    TemplateSet,
    build_cve_guidance_prompt,
    build_trace_selection_prompt,
)
from .trace_engine import StaticTrace, rank_traces

log = logging.getLogger(__name__)

__all__ = [
    "AgentBackendDescriptor",
    "AgentRequest",
    "PocCandidate",
    "AgentReply",
    "ScriptedBackend",
    "RemoteBackend",
    "SessionLog",
    "make_backend",
    "extract_source",
    "generate_candidate",
    "rank_traces_via_agent",
    "TraceRanking",
    "generate_cve_guidance",
]

_FENCE = re.compile(r"```[^\n`]*\n(.*?)```", re.S)
_ENTRY_CLASS = re.compile(r"^\s*public\s+(?:final\s+|abstract\s+)*class\s+([A-Za-z_$][\w$]*)", re.M)
_RANKING = re.compile(r"^\s*RANKING\s*:\s*(.+)$", re.M)
_LOCATION = re.compile(r"^\s*LOCATION\s*:\s*(\S+)(?:\s+(\S+?)(?::(\d+))?)?\s*$", re.M)


@dataclass(frozen=True)
class AgentRequest:
    prompt: PromptBundle
    attempt_index: int
    session_id: str


@dataclass(frozen=True)
class PocCandidate:
    source_text: str
    declared_entry: str | None = None
    agent_metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.source_text.strip():
            raise MalformedResponse("candidate source is empty")


@dataclass(frozen=True)
class AgentReply:
    text: str
    metadata: Mapping[str, Any]


class AgentBackend(Protocol):
    kind: str

    def complete(self, prompt: PromptBundle, session_id: str, attempt_index: int) -> AgentReply: ...


class SessionLog:
    """Append-only JSON-lines record of backend calls."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self._lock = threading.Lock()

    def record(self, **fields: Any) -> None:
        if self.path is None:
            return
        entry = {"ts": datetime.now(timezone.utc).isoformat(timespec="seconds"), **fields}
        line = json.dumps(entry, sort_keys=True)
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(line + "\n")


class ScriptedBackend:
    kind = "scripted"

    def __init__(self, script_dir: str | Path, session_log: SessionLog | None = None):
        self.script_dir = Path(script_dir)
        if not self.script_dir.is_dir():
            raise MalformedConfig(f"scripted backend directory does not exist: {self.script_dir}")
        self.session_log = session_log or SessionLog(None)
        self.calls = 0

    def complete(self, prompt: PromptBundle, session_id: str, attempt_index: int) -> AgentReply:
        path = self.script_dir / session_id / f"attempt_{attempt_index}.txt"
        start = time.monotonic()
        self.calls += 1
        if not path.is_file():
            self.session_log.record(backend=self.kind, session_id=session_id, attempt_index=attempt_index,
                                    prompt_kind=prompt.kind.value, prompt_digest=prompt.inputs_digest,
                                    status="fixture_missing")
            raise FixtureMissing(f"no fixture for session {session_id!r} attempt {attempt_index}: {path}")
        text = path.read_text(encoding="utf-8")
        latency = int((time.monotonic() - start) * 1000)
        self.session_log.record(backend=self.kind, session_id=session_id, attempt_index=attempt_index,
                                prompt_kind=prompt.kind.value, prompt_digest=prompt.inputs_digest,
                                latency_ms=latency, status="ok")
        return AgentReply(text, {"backend": self.kind, "latency_ms": latency})


class RemoteBackend:
    """Chat-completion style HTTPS backend with a single user message.

    Transport failures (connection errors, 429, 5xx) are retried with
    exponential backoff; malformed content is never retried here.
    """

    kind = "remote"

    def __init__(
        self,
        descriptor: AgentBackendDescriptor,
        session_log: SessionLog | None = None,
        *,
        client: httpx.Client | None = None,
        max_retries: int = 3,
        backoff_s: float = 0.5,
        timeout_s: float = 600.0,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if not descriptor.endpoint_or_script_dir:
            raise MalformedConfig("remote backend needs an endpoint URL")
        self.descriptor = descriptor
        self.session_log = session_log or SessionLog(None)
        self.client = client or httpx.Client(timeout=timeout_s)
        self.max_retries = max_retries
        self.backoff_s = backoff_s
        self.sleep = sleep
        self.calls = 0

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.descriptor.credential_env or CREDENTIAL_ENV)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(self, prompt: PromptBundle, session_id: str, attempt_index: int) -> AgentReply:
        body: dict[str, Any] = {"messages": [{"role": "user", "content": prompt.text}]}
        if self.descriptor.model_name:
            body["model"] = self.descriptor.model_name
        self.calls += 1
        start = time.monotonic()
        last_error = ""
        for attempt in range(self.max_retries + 1):
            if attempt:
                self.sleep(self.backoff_s * 2 ** (attempt - 1))
            try:
                resp = self.client.post(self.descriptor.endpoint_or_script_dir, json=body, headers=self._headers())
            except httpx.TransportError as exc:
                last_error = f"{type(exc).__name__}: {exc}"
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last_error = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                self._log(session_id, attempt_index, prompt, start, status=f"http_{resp.status_code}")
                raise BackendUnavailable(f"agent endpoint rejected the request: HTTP {resp.status_code}")
            return self._parse(resp, prompt, session_id, attempt_index, start, transport_retries=attempt)
        self._log(session_id, attempt_index, prompt, start, status="unavailable", error=last_error)
        raise BackendUnavailable(f"agent endpoint unavailable after {self.max_retries + 1} tries: {last_error}")

    def _parse(self, resp: httpx.Response, prompt: PromptBundle, session_id: str, attempt_index: int,
               start: float, transport_retries: int) -> AgentReply:
        try:
            data = resp.json()
            text = data["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            self._log(session_id, attempt_index, prompt, start, status="malformed")
            raise MalformedResponse(f"unexpected response shape: {exc}") from exc
        usage = data.get("usage") or {}
        meta: dict[str, Any] = {
            "backend": self.kind,
            "model": data.get("model") or self.descriptor.model_name,
            "latency_ms": int((time.monotonic() - start) * 1000),
            "transport_retries": transport_retries,
        }
        for key in ("prompt_tokens", "completion_tokens", "total_tokens"):
            if key in usage:
                meta[key] = usage[key]
        cost = usage.get("cost", data.get("cost"))
        if cost is not None:
            meta["cost_usd"] = cost
        self._log(session_id, attempt_index, prompt, start, status="ok",
                  **{k: v for k, v in meta.items() if k not in ("backend", "latency_ms")})
        return AgentReply(text, meta)

    def _log(self, session_id: str, attempt_index: int, prompt: PromptBundle, start: float, **extra: Any) -> None:
        self.session_log.record(
            backend=self.kind,
            session_id=session_id,
            attempt_index=attempt_index,
            prompt_kind=prompt.kind.value,
            prompt_digest=prompt.inputs_digest,
            latency_ms=int((time.monotonic() - start) * 1000),
            **extra,
        )


def make_backend(descriptor: AgentBackendDescriptor, session_log: str | Path | SessionLog | None = None,
                 **kwargs: Any) -> AgentBackend:
    slog = session_log if isinstance(session_log, SessionLog) else SessionLog(session_log)
    if descriptor.kind == "scripted":
        return ScriptedBackend(descriptor.endpoint_or_script_dir, slog)
    return RemoteBackend(descriptor, slog, **kwargs)


def extract_source(text: str) -> str:
    """Last fenced code block wins; without fences the whole body is the source."""
    blocks = _FENCE.findall(text)
    source = blocks[-1] if blocks else text
    if not source.strip():
        raise MalformedResponse("response contains no extractable source")
    return source if source.endswith("\n") else source + "\n"


def generate_candidate(backend: AgentBackend, req: AgentRequest) -> PocCandidate:
    reply = backend.complete(req.prompt, req.session_id, req.attempt_index)
    source = reply.text if backend.kind == "scripted" else extract_source(reply.text)
    if not source.strip():
        raise MalformedResponse(f"empty candidate for session {req.session_id!r} attempt {req.attempt_index}")
    m = _ENTRY_CLASS.search(source)
    return PocCandidate(source, m.group(1) if m else None, dict(reply.metadata))


@dataclass(frozen=True)
class TraceRanking:
    trace_ids: tuple[str, ...]
    fallback: bool = False
    reason: str = ""


def _parse_ranking(text: str, known: Sequence[str]) -> list[str] | None:
    m = _RANKING.search(text)
    if m is None:
        return None
    ids = [tok for tok in re.split(r"[\s,]+", m.group(1).strip()) if tok]
    if not ids or len(set(ids)) != len(ids) or any(i not in known for i in ids):
        return None
    return ids


def _parse_locations(text: str) -> list[CodeLocation]:
    hints = []
    for m in _LOCATION.finditer(text):
        cls, method = split_qualified(m.group(1))
        hints.append(CodeLocation(file=m.group(2) or "", class_fqn=cls, method=method,
                                  line=int(m.group(3)) if m.group(3) else None))
    return hints


def rank_traces_via_agent(
    backend: AgentBackend,
    instance: ProblemInstance,
    traces: Sequence[StaticTrace],
    *,
    templates: TemplateSet | None = None,
) -> TraceRanking:
    """Order traces by agent judgement.

    A valid ``RANKING:`` line is used as given (unlisted traces follow in
    similarity order). Otherwise ``LOCATION:`` candidates become similarity
    hints. With neither, the deterministic ranking is used and flagged.
    """
    if not traces:
        raise ValueError("no traces to rank")
    if len(traces) == 1:
        return TraceRanking((traces[0].trace_id,))
    prompt = build_trace_selection_prompt(instance, traces, templates)
    reply = backend.complete(prompt, f"{instance.id}__trace_selection", 0)
    known = [t.trace_id for t in traces]
    hints = _parse_locations(reply.text)
    by_similarity = [t.trace_id for t in rank_traces(traces, hints or list(instance.location_hints), len(traces))]
    ids = _parse_ranking(reply.text, known)
    if ids is not None:
        rest = [i for i in by_similarity if i not in ids]
        return TraceRanking(tuple(ids + rest))
    if hints:
        return TraceRanking(tuple(by_similarity))
    reason = "agent reply had no valid RANKING or LOCATION lines"
    log.warning("trace ranking for %s fell back to deterministic order: %s", instance.id, reason)
    return TraceRanking(tuple(by_similarity), fallback=True, reason=reason)


def generate_cve_guidance(
    backend: AgentBackend,
    instance: ProblemInstance,
    cache_dir: str | Path,
    *,
    templates: TemplateSet | None = None,
) -> str:
    """Guidance text, cached under ``<cache_dir>/<instance id>/<prompt digest>.txt``."""
    prompt = build_cve_guidance_prompt(instance, templates)
    safe_id = re.sub(r"[^A-Za-z0-9._-]", "_", instance.id)
    path = Path(cache_dir) / safe_id / f"{prompt.inputs_digest}.txt"
    if path.is_file():
        return path.read_text(encoding="utf-8")
    reply = backend.complete(prompt, f"{instance.id}__guidance", 0)
    text = reply.text.strip()
    if not text:
        raise MalformedResponse(f"empty guidance for {instance.id}")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)
    return text
