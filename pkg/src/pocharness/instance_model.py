"""Vulnerability instances, their manifests, and run configuration.

A manifest is a YAML file, one per instance. Paths inside it (trace files,
``meta.project_dir``) are resolved relative to the manifest's directory.
The README lists every manifest field.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import yaml

from .errors import (
    DanglingReference,
    DuplicateInstance,
    InvariantViolation,
    MalformedConfig,
    MalformedManifest,
    MissingField,
)
from .locations import CodeLocation
from .trace_engine import StaticTrace, dump_static_traces, parse_static_traces

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = 1
POC_PLACEHOLDER = "{POC}"
DEFAULT_MARKER = "[VULN]"
DEFAULT_TOP_K = 5
DEFAULT_BUDGET = 5
CREDENTIAL_ENV = "POCHARNESS_API_KEY"

MODES = ("no_trace", "multi_trace")
RANKINGS = ("similarity", "agent")


@dataclass(frozen=True)
class ProjectMeta:
    commit: str
    module_path: str
    build_script_template: str
    run_command_template: str
    timeout_seconds: int = 60
    project_dir: str | None = None
    instrumentation_log: str | None = None

    def __post_init__(self) -> None:
        if POC_PLACEHOLDER not in self.run_command_template:
            raise MalformedManifest(f"run_command_template must contain {POC_PLACEHOLDER}")
        if not isinstance(self.timeout_seconds, int) or self.timeout_seconds <= 0:
            raise MalformedManifest("timeout_seconds must be a positive integer")


@dataclass(frozen=True)
class ProblemInstance:
    id: str
    cwe_id: str
    project_slug: str
    vul_ref: str
    fix_ref: str
    cve_description: str
    cwe_description: str
    meta: ProjectMeta
    cve_guidance: str | None = None
    ground_truth: tuple[CodeLocation, ...] = ()
    traces: tuple[StaticTrace, ...] = ()
    location_hints: tuple[CodeLocation, ...] = ()
    posthoc_enabled: bool = True

    def __post_init__(self) -> None:
        if not self.id:
            raise MalformedManifest("instance id must be non-empty")
        if self.vul_ref == self.fix_ref:
            raise MalformedManifest("vul_ref and fix_ref must differ")
        if self.posthoc_enabled and not self.ground_truth:
            raise MalformedManifest("ground_truth may be empty only when posthoc is disabled")
        ids = [t.trace_id for t in self.traces]
        if len(set(ids)) != len(ids):
            raise InvariantViolation("trace ids must be unique within an instance")

    def with_guidance(self, text: str) -> ProblemInstance:
        return dataclasses.replace(self, cve_guidance=text)


@dataclass(frozen=True)
class AgentBackendDescriptor:
    kind: str  # "remote" | "scripted"
    endpoint_or_script_dir: str
    model_name: str | None = None
    credential_env: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("remote", "scripted"):
            raise MalformedConfig(f"unknown agent backend kind {self.kind!r}")

    def label(self) -> str:
        return f"{self.kind}/{self.model_name}" if self.model_name else self.kind


@dataclass(frozen=True)
class RunConfig:
    mode: str = "multi_trace"
    top_k: int = DEFAULT_TOP_K
    budget: int = DEFAULT_BUDGET
    agent_backend: AgentBackendDescriptor | None = None
    marker: str = DEFAULT_MARKER
    trace_ranking: str = "similarity"
    stop_early: bool = False
    timeout_seconds: int | None = None
    output_cap_bytes: int = 64 * 1024
    feedback_output_cap: int = 4000
    retain_workspaces: bool = False
    workspace_root: str | None = None
    source_constraint: str = "a single Java source file"
    poc_extension: str = ".java"
    parallel: int = 1
    generate_guidance: bool = False
    cache_dir: str = ".pocharness-cache"
    label: str | None = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise MalformedConfig(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.trace_ranking not in RANKINGS:
            raise MalformedConfig(f"trace_ranking must be one of {RANKINGS}")
        for name in ("top_k", "budget", "output_cap_bytes", "feedback_output_cap", "parallel"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise MalformedConfig(f"{name} must be a positive integer, got {value!r}")
        if self.timeout_seconds is not None and (not isinstance(self.timeout_seconds, int) or self.timeout_seconds < 1):
            raise MalformedConfig("timeout_seconds must be a positive integer")
        if not self.marker:
            raise MalformedConfig("marker must be non-empty")

    @property
    def config_label(self) -> str:
        if self.label:
            return self.label
        agent = self.agent_backend.label() if self.agent_backend else "none"
        return f"{agent}/{self.mode}"


# --- loading -----------------------------------------------------------------


def _read_yaml(path: Path, error: type) -> Any:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise error(f"cannot read {path}: {exc}") from exc
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        if error is MalformedManifest and mark is not None:
            raise MalformedManifest(f"{path}: {getattr(exc, 'problem', exc)}", mark.line + 1, mark.column + 1) from exc
        raise error(f"{path}: {exc}") from exc


def _require(data: Mapping[str, Any], key: str, source: str) -> Any:
    value = data.get(key)
    if value is None or (isinstance(value, str) and not value.strip()):
        raise MissingField(key, source)
    return value


def _location(data: Any, source: str) -> CodeLocation:
    if not isinstance(data, Mapping):
        raise MalformedManifest(f"{source}: location entries must be mappings")
    loc = CodeLocation.from_dict(dict(data))
    if not loc.file or not loc.method:
        raise MalformedManifest(f"{source}: locations need non-empty 'file' and 'method'")
    if loc.line is not None and loc.line < 1:
        raise MalformedManifest(f"{source}: location line must be positive")
    return loc


def _hint(data: Any, source: str) -> CodeLocation:
    # hints are partial on purpose: a bare method name is a useful hint
    if not isinstance(data, Mapping):
        raise MalformedManifest(f"{source}: hint entries must be mappings")
    return CodeLocation.from_dict(dict(data))


def instance_from_dict(data: Mapping[str, Any], base_dir: Path, source: str = "") -> ProblemInstance:
    if not isinstance(data, Mapping):
        raise MalformedManifest(f"{source}: top level must be a mapping")
    for key in ("id", "cwe_id", "project_slug", "vul_ref", "fix_ref", "cve_description", "cwe_description", "meta"):
        _require(data, key, source)
    meta_raw = data["meta"]
    if not isinstance(meta_raw, Mapping):
        raise MalformedManifest(f"{source}: 'meta' must be a mapping")
    for key in ("commit", "module_path", "run_command_template"):
        _require(meta_raw, key, source)

    project_dir = meta_raw.get("project_dir")
    if project_dir is not None:
        resolved = (base_dir / str(project_dir)).resolve()
        if not resolved.is_dir():
            raise DanglingReference(str(project_dir), "project directory")
        project_dir = str(resolved)

    meta = ProjectMeta(
        commit=str(meta_raw["commit"]),
        module_path=str(meta_raw["module_path"]),
        build_script_template=str(meta_raw.get("build_script_template") or ""),
        run_command_template=str(meta_raw["run_command_template"]),
        timeout_seconds=meta_raw.get("timeout_seconds", 60),
        project_dir=project_dir,
        instrumentation_log=meta_raw.get("instrumentation_log"),
    )

    traces: list[StaticTrace] = []
    for ref in data.get("traces") or []:
        path = (base_dir / str(ref)).resolve()
        if not path.is_file():
            raise DanglingReference(str(ref), "trace file")
        traces.extend(parse_static_traces(path))

    ground_truth = tuple(_location(x, source) for x in data.get("ground_truth") or [])
    hints = tuple(_hint(x, source) for x in data.get("location_hints") or [])

    return ProblemInstance(
        id=str(data["id"]),
        cwe_id=str(data["cwe_id"]),
        project_slug=str(data["project_slug"]),
        vul_ref=str(data["vul_ref"]),
        fix_ref=str(data["fix_ref"]),
        cve_description=str(data["cve_description"]).strip(),
        cwe_description=str(data["cwe_description"]).strip(),
        cve_guidance=(str(data["cve_guidance"]).strip() or None) if data.get("cve_guidance") else None,
        meta=meta,
        ground_truth=ground_truth,
        traces=tuple(traces),
        location_hints=hints,
        posthoc_enabled=bool(data.get("posthoc", True)),
    )


def load_instance(manifest_path: str | Path) -> ProblemInstance:
    path = Path(manifest_path)
    if not path.is_file():
        raise DanglingReference(str(path), "manifest")
    data = _read_yaml(path, MalformedManifest)
    return instance_from_dict(data or {}, path.parent, str(path))


def load_run_set(paths: Iterable[str | Path]) -> list[ProblemInstance]:
    """Load manifests (directories expand to their ``*.yaml`` files, sorted)."""
    instances: list[ProblemInstance] = []
    seen: set[str] = set()
    for p in paths:
        p = Path(p)
        files = sorted(p.glob("*.yaml")) + sorted(p.glob("*.yml")) if p.is_dir() else [p]
        for f in files:
            inst = load_instance(f)
            if inst.id in seen:
                raise DuplicateInstance(inst.id)
            seen.add(inst.id)
            instances.append(inst)
    return instances


def instance_to_dict(instance: ProblemInstance, trace_files: list[str]) -> dict[str, Any]:
    meta = instance.meta
    meta_out: dict[str, Any] = {
        "commit": meta.commit,
        "module_path": meta.module_path,
        "build_script_template": meta.build_script_template,
        "run_command_template": meta.run_command_template,
        "timeout_seconds": meta.timeout_seconds,
    }
    if meta.project_dir is not None:
        meta_out["project_dir"] = meta.project_dir
    if meta.instrumentation_log is not None:
        meta_out["instrumentation_log"] = meta.instrumentation_log
    return {
        "schema": MANIFEST_SCHEMA,
        "id": instance.id,
        "cwe_id": instance.cwe_id,
        "project_slug": instance.project_slug,
        "vul_ref": instance.vul_ref,
        "fix_ref": instance.fix_ref,
        "cve_description": instance.cve_description,
        "cwe_description": instance.cwe_description,
        "cve_guidance": instance.cve_guidance,
        "meta": meta_out,
        "posthoc": instance.posthoc_enabled,
        "ground_truth": [loc.to_dict() for loc in instance.ground_truth],
        "location_hints": [loc.to_dict() for loc in instance.location_hints],
        "traces": trace_files,
    }


def dump_instance(instance: ProblemInstance, manifest_path: str | Path) -> Path:
    """Write a manifest (and a sibling trace file when the instance has traces)."""
    path = Path(manifest_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    trace_files: list[str] = []
    if instance.traces:
        trace_path = path.with_suffix(".traces")
        trace_path.write_text(dump_static_traces(instance.traces), encoding="utf-8")
        trace_files.append(trace_path.name)
    data = instance_to_dict(instance, trace_files)
    path.write_text(yaml.safe_dump(data, sort_keys=False, allow_unicode=True), encoding="utf-8")
    return path


# --- run configuration -------------------------------------------------------

_CONFIG_KEYS = {f.name for f in dataclasses.fields(RunConfig)}


def descriptor_from_dict(data: Mapping[str, Any], base_dir: Path) -> AgentBackendDescriptor:
    if not isinstance(data, Mapping) or "kind" not in data:
        raise MalformedConfig("agent_backend needs a 'kind'")
    target = str(data.get("endpoint_or_script_dir") or data.get("script_dir") or data.get("endpoint") or "")
    if data["kind"] == "scripted" and target:
        target = str((base_dir / target).resolve())
    return AgentBackendDescriptor(
        kind=str(data["kind"]),
        endpoint_or_script_dir=target,
        model_name=data.get("model_name"),
        credential_env=data.get("credential_env"),
    )


def run_config_from_dict(data: Mapping[str, Any] | None, base_dir: Path = Path(".")) -> RunConfig:
    data = dict(data or {})
    unknown = set(data) - _CONFIG_KEYS
    if unknown:
        raise MalformedConfig(f"unknown config keys: {sorted(unknown)}")
    if data.get("agent_backend") is not None:
        data["agent_backend"] = descriptor_from_dict(data["agent_backend"], base_dir)
    try:
        return RunConfig(**data)
    except TypeError as exc:
        raise MalformedConfig(str(exc)) from exc


def load_run_config(config_path: str | Path) -> RunConfig:
    path = Path(config_path)
    if not path.is_file():
        raise MalformedConfig(f"config file not found: {path}")
    data = _read_yaml(path, MalformedConfig)
    if data is not None and not isinstance(data, Mapping):
        raise MalformedConfig(f"{path}: top level must be a mapping")
    return run_config_from_dict(data, path.parent)


def run_config_to_dict(config: RunConfig) -> dict[str, Any]:
    out = dataclasses.asdict(config)
    return out
