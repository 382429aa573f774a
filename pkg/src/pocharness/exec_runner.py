"""Build and run a PoC candidate with external commands.

Command templates understand four placeholders, each substituted
(shell-quoted) wherever it appears:

    {POC}        path of the candidate source file (required in run commands)
    {WORKSPACE}  the per-attempt scratch directory
    {LOG}        where instrumentation should write EVT lines
    {PROJECT}    ``meta.project_dir``, or the workspace when unset

Commands are split with :mod:`shlex` and executed without a shell. Wrap a
command in ``sh -c '...'`` if pipes or redirection are needed.

Nothing here sandboxes the PoC beyond a process group and a timeout.
Running exploits safely is the operator's job.
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
import shlex
import shutil
import signal
import subprocess
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

from .errors import CommandSpawnError, MissingPlaceholder, WorkspaceError
from .instance_model import CREDENTIAL_ENV, POC_PLACEHOLDER, ProblemInstance, ProjectMeta, RunConfig
from .locations import CodeLocation
from .trace_engine import DynamicTrace, ExecutionEvent, parse_dynamic_log

if TYPE_CHECKING:
    from .agent_gateway import PocCandidate

log = logging.getLogger(__name__)

# process exit codes are 0..255 or -signal, so this can never collide
TIMEOUT_EXIT_CODE = -1000
TRUNCATION_MARKER = "\n[... output truncated at {cap} bytes ...]\n"
DEFAULT_LOG_NAME = "instrumentation.log"

_PLACEHOLDERS = ("POC", "WORKSPACE", "LOG", "PROJECT")
_ENTRY_CLASS = re.compile(r"^\s*public\s+(?:final\s+|abstract\s+)*class\s+([A-Za-z_$][\w$]*)", re.M)

_process_slots = threading.BoundedSemaphore(8)


def set_process_limit(n: int) -> None:
    """Bound the number of child processes running at once across threads."""
    global _process_slots
    if n < 1:
        raise ValueError("process limit must be positive")
    _process_slots = threading.BoundedSemaphore(n)


@dataclass(frozen=True)
class RunOutcome:
    exit_code: int
    output: str
    dynamic_trace: DynamicTrace = field(default_factory=DynamicTrace)
    wall_time_ms: int = 0
    timed_out: bool = False
    output_truncated: bool = False

    def __post_init__(self) -> None:
        if self.timed_out and self.exit_code != TIMEOUT_EXIT_CODE:
            raise ValueError("timed-out outcomes must carry TIMEOUT_EXIT_CODE")

    def to_dict(self) -> dict:
        return {
            "exit_code": self.exit_code,
            "timed_out": self.timed_out,
            "wall_time_ms": self.wall_time_ms,
            "output_truncated": self.output_truncated,
            "output": self.output,
            "dynamic_trace": [
                {"sequence": e.sequence, **e.location.to_dict()} for e in self.dynamic_trace.events
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> RunOutcome:
        events = tuple(
            ExecutionEvent(CodeLocation.from_dict(e), int(e["sequence"])) for e in data.get("dynamic_trace", [])
        )
        return cls(
            exit_code=int(data["exit_code"]),
            output=data["output"],
            dynamic_trace=DynamicTrace(events),
            wall_time_ms=int(data.get("wall_time_ms", 0)),
            timed_out=bool(data.get("timed_out", False)),
            output_truncated=bool(data.get("output_truncated", False)),
        )


def materialize_template(
    template: str,
    *,
    poc: str,
    workspace: str = "",
    log: str = "",
    project: str = "",
    require_poc: bool = True,
    quote: bool = False,
) -> str:
    if require_poc and POC_PLACEHOLDER not in template:
        raise MissingPlaceholder(f"command template lacks {POC_PLACEHOLDER}: {template!r}")
    values = {"POC": poc, "WORKSPACE": workspace, "LOG": log, "PROJECT": project}
    pattern = re.compile(r"\{(" + "|".join(_PLACEHOLDERS) + r")\}")
    return pattern.sub(lambda m: shlex.quote(values[m[1]]) if quote else values[m[1]], template)


def materialize_command(
    meta: ProjectMeta, poc_path: str | Path, *, workspace: str | Path = "", log_path: str | Path = ""
) -> str:
    """Substitute the run template. Repeated placeholders are all replaced."""
    ws = str(workspace)
    return materialize_template(
        meta.run_command_template,
        poc=str(poc_path),
        workspace=ws,
        log=str(log_path),
        project=meta.project_dir or ws,
        quote=True,
    )


def entry_name(candidate: PocCandidate) -> str:
    if candidate.declared_entry:
        return candidate.declared_entry
    m = _ENTRY_CLASS.search(candidate.source_text)
    return m.group(1) if m else "Poc"


class _Capture:
    """Drains a pipe in a thread, keeping at most ``cap`` bytes."""

    def __init__(self, stream, cap: int):
        self.cap = cap
        self.chunks: list[bytes] = []
        self.size = 0
        self.truncated = False
        self._thread = threading.Thread(target=self._drain, args=(stream,), daemon=True)
        self._thread.start()

    def _drain(self, stream) -> None:
        for chunk in iter(lambda: stream.read1(65536), b""):
            room = self.cap - self.size
            if room > 0:
                self.chunks.append(chunk[:room])
                self.size += min(len(chunk), room)
            if len(chunk) > room:
                self.truncated = True
        stream.close()

    def join(self, timeout: float | None = None) -> None:
        self._thread.join(timeout)

    def data(self) -> bytes:
        return b"".join(self.chunks)


def _kill_group(proc: subprocess.Popen) -> None:
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        proc.kill()


def _execute(argv: list[str], cwd: Path, env: dict, deadline: float, cap: int) -> tuple[int | None, bytes, bool]:
    """Returns (exit code or None on timeout, captured bytes, truncated)."""
    with _process_slots:
        try:
            proc = subprocess.Popen(
                argv,
                cwd=cwd,
                env=env,
                stdin=subprocess.DEVNULL,
                stdout=subprocess.PIPE,
                stderr=subprocess.STDOUT,
                start_new_session=True,
            )
        except FileNotFoundError as exc:
            raise CommandSpawnError(f"executable not found: {argv[0]!r}") from exc
        except PermissionError as exc:
            raise CommandSpawnError(f"cannot execute {argv[0]!r}: {exc}") from exc
        capture = _Capture(proc.stdout, cap)
        code: int | None
        try:
            code = proc.wait(timeout=max(0.0, deadline - time.monotonic()))
        except subprocess.TimeoutExpired:
            _kill_group(proc)
            proc.wait()
            code = None
        else:
            # stray background children would otherwise hold the pipe open
            _kill_group(proc)
        capture.join(timeout=5.0)
        return code, capture.data(), capture.truncated


def _workspace_for(instance: ProblemInstance, candidate: PocCandidate, config: RunConfig) -> Path:
    root = Path(config.workspace_root) if config.workspace_root else Path(tempfile.gettempdir()) / "pocharness"
    key = hashlib.sha256(f"{instance.id}\0{candidate.source_text}".encode("utf-8")).hexdigest()[:16]
    safe_id = re.sub(r"[^A-Za-z0-9._-]", "_", instance.id)
    return root / safe_id / key


def run_candidate(instance: ProblemInstance, candidate: PocCandidate, config: RunConfig) -> RunOutcome:
    """Write the candidate to a fresh workspace, build it, run it, capture (c, s, tau).

    A timeout is reported as an outcome with ``timed_out=True``, not raised.
    """
    if not candidate.source_text:
        raise ValueError("candidate source is empty")
    meta = instance.meta
    workspace = _workspace_for(instance, candidate, config)
    try:
        if workspace.exists():
            shutil.rmtree(workspace)
        workspace.mkdir(parents=True)
        poc_path = workspace / f"{entry_name(candidate)}{config.poc_extension}"
        poc_path.write_text(candidate.source_text, encoding="utf-8")
    except OSError as exc:
        raise WorkspaceError(f"cannot prepare workspace {workspace}: {exc}") from exc

    if meta.instrumentation_log:
        log_path = Path(materialize_template(meta.instrumentation_log, poc=str(poc_path), workspace=str(workspace),
                                             require_poc=False))
    else:
        log_path = workspace / DEFAULT_LOG_NAME
    project = meta.project_dir or str(workspace)
    subst = dict(poc=str(poc_path), workspace=str(workspace), log=str(log_path), project=project, quote=True)

    commands = []
    if meta.build_script_template.strip():
        commands.append(materialize_template(meta.build_script_template, require_poc=False, **subst))
    commands.append(materialize_template(meta.run_command_template, **subst))

    env = dict(os.environ)
    credential = config.agent_backend.credential_env if config.agent_backend else None
    for name in {CREDENTIAL_ENV, credential} - {None}:
        env.pop(name, None)
    env.update(POCHARNESS_POC=str(poc_path), POCHARNESS_WORKSPACE=str(workspace), POCHARNESS_LOG=str(log_path))

    timeout = config.timeout_seconds or meta.timeout_seconds
    cwd = Path(meta.project_dir) if meta.project_dir else workspace
    start = time.monotonic()
    deadline = start + timeout
    captured = b""
    truncated = False
    code: int | None = 0
    for command in commands:
        argv = shlex.split(command)
        if not argv:
            raise CommandSpawnError(f"empty command from template: {command!r}")
        room = config.output_cap_bytes - len(captured)
        code, data, cut = _execute(argv, cwd, env, deadline, max(room, 0))
        captured += data
        truncated = truncated or cut
        if code != 0:
            break
    wall_ms = int((time.monotonic() - start) * 1000)

    output = captured.decode("utf-8", errors="replace")
    if truncated:
        output += TRUNCATION_MARKER.format(cap=config.output_cap_bytes)

    try:
        log_text = log_path.read_text(encoding="utf-8", errors="replace") if log_path.is_file() else None
    except OSError:
        log_text = None
    dyn = parse_dynamic_log(log_text if log_text is not None else output)

    if not config.retain_workspaces:
        shutil.rmtree(workspace, ignore_errors=True)

    timed_out = code is None
    return RunOutcome(
        exit_code=TIMEOUT_EXIT_CODE if timed_out else code,
        output=output,
        dynamic_trace=dyn,
        wall_time_ms=wall_ms,
        timed_out=timed_out,
        output_truncated=truncated,
    )
