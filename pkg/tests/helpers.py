"""Builders shared by the test modules."""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from pocharness.agent_gateway import AgentReply
from pocharness.instance_model import ProblemInstance, ProjectMeta, RunConfig
from pocharness.locations import CodeLocation, split_qualified
from pocharness.trace_engine import StaticTrace, StepKind, TraceStep

REPO = Path(__file__).resolve().parents[1]
DEMO = REPO / "demo"
PROJECT = DEMO / "project"
PY = sys.executable


def loc(name: str, file: str | None = None, line: int | None = None) -> CodeLocation:
    cls, method = split_qualified(name)
    if file is None:
        file = (cls.rpartition(".")[2] or method) + ".java"
    return CodeLocation(file=file, class_fqn=cls, method=method, line=line)


def make_trace(trace_id: str, names: list[str]) -> StaticTrace:
    last = len(names) - 1
    steps = []
    for i, name in enumerate(names):
        kind = StepKind.SOURCE if i == 0 else StepKind.SINK if i == last else StepKind.INTERMEDIATE
        steps.append(TraceStep(loc(name, line=10 + i), kind))
    return StaticTrace(trace_id, tuple(steps))


def make_instance(
    *,
    traces: tuple[StaticTrace, ...] = (),
    ground_truth: tuple[CodeLocation, ...] = (loc("a.Sink.run"),),
    run: str | None = None,
    build: str = "",
    timeout: int = 10,
    project_dir: Path | None = PROJECT,
    cwe_id: str = "CWE-89",
    instance_id: str = "CVE-2000-0001",
    hints: tuple[CodeLocation, ...] = (),
) -> ProblemInstance:
    meta = ProjectMeta(
        commit="abc123",
        module_path="core",
        build_script_template=build,
        run_command_template=run or f"{PY} {{PROJECT}}/run_poc.py {{POC}} {{LOG}}",
        timeout_seconds=timeout,
        project_dir=str(project_dir) if project_dir else None,
    )
    return ProblemInstance(
        id=instance_id,
        cwe_id=cwe_id,
        project_slug="demo-lib",
        vul_ref="v1.0",
        fix_ref="v1.1",
        cve_description="Query built from a request parameter.",
        cwe_description="SQL injection.",
        meta=meta,
        ground_truth=ground_truth,
        traces=traces,
        location_hints=hints,
    )


def poc(*directives: str, name: str = "Poc") -> str:
    """A fake Java PoC whose behaviour is given by run_poc.py directives."""
    body = "\n".join(f"        //! {d}" for d in directives)
    return f"public class {name} {{\n    public static void main(String[] args) {{\n{body}\n    }}\n}}\n"


def config(tmp_path: Path, **kw) -> RunConfig:
    kw.setdefault("workspace_root", str(tmp_path / "ws"))
    return RunConfig(**kw)


@dataclass
class ListBackend:
    """In-memory agent returning ``replies[attempt_index]`` and recording prompts."""

    kind = "scripted"

    replies: list[str]
    prompts: list[str] = field(default_factory=list)
    sessions: list[str] = field(default_factory=list)

    def complete(self, prompt, session_id, attempt_index):
        self.prompts.append(prompt.text)
        self.sessions.append(session_id)
        return AgentReply(self.replies[attempt_index], {"backend": "list"})


# --- demo golden files -------------------------------------------------------

MASKED_KEYS = frozenset({"started_at", "finished_at", "wall_time_ms", "latency_ms"})


def mask(obj):
    """Replace run-dependent timing fields with a fixed token."""
    if isinstance(obj, dict):
        return {k: "<masked>" if k in MASKED_KEYS else mask(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [mask(v) for v in obj]
    return obj


def masked_text(path: Path) -> str:
    return json.dumps(mask(json.loads(path.read_text(encoding="utf-8"))), indent=2, sort_keys=True) + "\n"
