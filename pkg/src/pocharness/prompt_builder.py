"""Deterministic prompt assembly from text templates.

Templates live in ``templates/`` and use ``{{name}}`` placeholders.
Rendering is a single pass: substituted values are never rescanned, and a
template placeholder without a value raises :class:`TemplateError`.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

from .errors import CriteriaMismatch, EmptyTraceSet, MissingContext, TemplateError
from .exec_runner import materialize_template
from .instance_model import RunConfig, ProblemInstance
from .trace_engine import StaticTrace, format_trace_for_prompt

TEMPLATE_DIR = Path(__file__).parent / "templates"

_PLACEHOLDER = re.compile(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}")
_CWE_ID = re.compile(r"^CWE-\d+$")
_SECTION_LINE = re.compile(r"^[ \t]*\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}[ \t]*\n(?:[ \t]*\n)?", re.M)


class PromptKind(str, Enum):
    CVE_GUIDANCE = "cve_guidance"
    TRACE_SELECTION = "trace_selection"
    POC_MAIN = "poc_main"
    POC_RETRY = "poc_retry"


@dataclass(frozen=True)
class PromptBundle:
    kind: PromptKind
    text: str
    inputs_digest: str


@dataclass(frozen=True)
class CweCriteria:
    cwe_id: str
    criteria_text: str

    def __post_init__(self) -> None:
        if not _CWE_ID.match(self.cwe_id):
            raise ValueError(f"malformed CWE id {self.cwe_id!r}")


def template_placeholders(template: str) -> set[str]:
    return set(_PLACEHOLDER.findall(template))


def render(template: str, values: Mapping[str, str]) -> str:
    # a placeholder alone on its line with an empty value drops that line
    # (plus one trailing blank line), so optional sections leave no gap
    def drop(m: re.Match) -> str:
        name = m.group(1)
        return "" if name in values and values[name] == "" else m.group(0)

    template = _SECTION_LINE.sub(drop, template)

    def sub(m: re.Match) -> str:
        name = m.group(1)
        if name not in values:
            raise TemplateError(f"no value for template placeholder {{{{{name}}}}}")
        return str(values[name])

    return _PLACEHOLDER.sub(sub, template)


def _digest(kind: PromptKind, template: str, values: Mapping[str, str]) -> str:
    payload = json.dumps({"kind": kind.value, "template": template, "values": dict(values)}, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class TemplateSet:
    """Loads templates from a directory, falling back to the shipped assets."""

    def __init__(self, directory: str | Path | None = None):
        self.directory = Path(directory) if directory else TEMPLATE_DIR

    def get(self, name: str) -> str:
        for base in (self.directory, TEMPLATE_DIR):
            path = base / name
            if path.is_file():
                return path.read_text(encoding="utf-8")
        raise TemplateError(f"template {name!r} not found")

    def criteria(self, cwe_id: str) -> CweCriteria:
        for base in (self.directory, TEMPLATE_DIR):
            path = base / "cwe" / f"{cwe_id}.txt"
            if path.is_file():
                return CweCriteria(cwe_id, path.read_text(encoding="utf-8").strip())
        return CweCriteria(cwe_id, self.get("cwe/generic.txt").strip())


DEFAULT_TEMPLATES = TemplateSet()


def load_cwe_criteria(cwe_id: str, templates: TemplateSet | None = None) -> CweCriteria:
    return (templates or DEFAULT_TEMPLATES).criteria(cwe_id)


def _bundle(kind: PromptKind, template: str, values: Mapping[str, str]) -> PromptBundle:
    return PromptBundle(kind, render(template, values), _digest(kind, template, values))


def build_cve_guidance_prompt(instance: ProblemInstance, templates: TemplateSet | None = None) -> PromptBundle:
    ts = templates or DEFAULT_TEMPLATES
    for name in ("cve_description", "cwe_description"):
        if not getattr(instance, name, None):
            raise MissingContext(name)
    values = {
        "project_slug": instance.project_slug,
        "vul_ref": instance.vul_ref,
        "module_path": instance.meta.module_path,
        "cve_id": instance.id,
        "cwe_id": instance.cwe_id,
        "cve_description": instance.cve_description,
        "cwe_description": instance.cwe_description,
        "cwe_criteria": ts.criteria(instance.cwe_id).criteria_text,
    }
    return _bundle(PromptKind.CVE_GUIDANCE, ts.get("cve_guidance.txt"), values)


def build_trace_selection_prompt(
    instance: ProblemInstance, traces: Sequence[StaticTrace], templates: TemplateSet | None = None
) -> PromptBundle:
    if not traces:
        raise EmptyTraceSet("trace selection needs at least one candidate trace")
    ts = templates or DEFAULT_TEMPLATES
    values = {
        "project_slug": instance.project_slug,
        "cve_id": instance.id,
        "cwe_id": instance.cwe_id,
        "cve_description": instance.cve_description,
        "trace_blocks": "\n\n".join(format_trace_for_prompt(t) for t in traces),
    }
    return _bundle(PromptKind.TRACE_SELECTION, ts.get("trace_selection.txt"), values)


def _display_command(template: str) -> str:
    return materialize_template(template, poc="<PoC file>", workspace="<workspace>", log="<instrumentation log>",
                                project="<project>", require_poc=False)


def build_main_prompt(
    instance: ProblemInstance,
    trace: StaticTrace | None,
    criteria: CweCriteria,
    feedback: str | None = None,
    *,
    config: RunConfig | None = None,
    templates: TemplateSet | None = None,
) -> PromptBundle:
    """Base PoC prompt, or the retry prompt when ``feedback`` is given.

    The retry text is the base text followed by the feedback section, so a
    retry prompt always starts with the matching base prompt.
    """
    if criteria.cwe_id != instance.cwe_id:
        raise CriteriaMismatch(f"criteria for {criteria.cwe_id} used with a {instance.cwe_id} instance")
    ts = templates or DEFAULT_TEMPLATES
    cfg = config or RunConfig()
    meta = instance.meta

    guidance = ""
    if instance.cve_guidance:
        guidance = render(ts.get("guidance_section.txt"), {"cve_guidance": instance.cve_guidance}).rstrip("\n")
    trace_section = sink_constraint = ""
    if trace is not None:
        trace_section = render(ts.get("trace_section.txt"), {"trace_block": format_trace_for_prompt(trace)}).rstrip("\n")
        sink_constraint = (
            f"- The exploit must execute the sink of trace {trace.trace_id} "
            f"({trace.sink.location.qualified_name()}) in the project code."
        )
    values = {
        "cve_id": instance.id,
        "cwe_id": instance.cwe_id,
        "project_slug": instance.project_slug,
        "cve_description": instance.cve_description,
        "cwe_description": instance.cwe_description,
        "guidance_section": guidance,
        "cwe_criteria": criteria.criteria_text,
        "trace_section": trace_section,
        "commit": meta.commit,
        "module_path": meta.module_path,
        "build_command": _display_command(meta.build_script_template) if meta.build_script_template else "(none)",
        "run_command": _display_command(meta.run_command_template),
        "timeout_seconds": str(cfg.timeout_seconds or meta.timeout_seconds),
        "source_constraint": cfg.source_constraint,
        "marker": cfg.marker,
        "sink_constraint": sink_constraint,
    }
    main_template = ts.get("poc_main.txt")
    base = _bundle(PromptKind.POC_MAIN, main_template, values)
    if feedback is None:
        return base

    section_template = ts.get("feedback_section.txt")
    section = render(section_template, {"feedback": feedback})
    text = base.text + "\n" + section
    digest = _digest(PromptKind.POC_RETRY, main_template + section_template, {**values, "feedback": feedback})
    return PromptBundle(PromptKind.POC_RETRY, text, digest)
