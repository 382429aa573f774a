"""Command-line entry point: ``pocharness <subcommand> ...``.

Exit status: 0 success, 2 usage, and one code per error family (see
``EXIT_CODES``). Errors are also written to stderr as one JSON line.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

from . import __version__
from .agent_gateway import generate_cve_guidance, make_backend
from .errors import HarnessError, MalformedConfig, StoreError
from .exec_runner import set_process_limit
from .instance_model import AgentBackendDescriptor, RunConfig, load_instance, load_run_config, load_run_set
from .reporting import (
    GROUP_KEYS,
    aggregate_report,
    annotation_distribution,
    cost_records,
    format_costs,
    format_distribution,
    format_report,
)
from .run_store import ANNOTATION_CATEGORIES, RunStore
from .trace_engine import convert_log, load_adapters
from .validation_loop import posthoc_validate, run_instance, select_traces

log = logging.getLogger("pocharness")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CODES = {
    "internal": 1,
    "input": 3,
    "prompt": 4,
    "agent": 5,
    "execution": 6,
    "validation": 7,
    "store": 8,
}


def _parse_agent(spec: str | None, base: AgentBackendDescriptor | None) -> AgentBackendDescriptor | None:
    """``scripted:<dir>``, ``remote:<url>``, or a bare kind reusing the config's target."""
    if spec is None:
        return base
    kind, _, target = spec.partition(":")
    if kind not in ("scripted", "remote"):
        raise MalformedConfig(f"--agent must start with 'scripted' or 'remote', got {spec!r}")
    if not target:
        if base is None or base.kind != kind:
            raise MalformedConfig(f"--agent {kind} needs a target, e.g. {kind}:<path-or-url>")
        return base
    if kind == "scripted":
        target = str(Path(target).resolve())
    return AgentBackendDescriptor(
        kind=kind,
        endpoint_or_script_dir=target,
        model_name=base.model_name if base and base.kind == kind else None,
        credential_env=base.credential_env if base else None,
    )


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    config = load_run_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for name in ("mode", "top_k", "budget", "timeout_seconds", "parallel", "workspace_root", "label"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "stop_early", False):
        overrides["stop_early"] = True
    if getattr(args, "retain_workspaces", False):
        overrides["retain_workspaces"] = True
    if getattr(args, "ranking", None):
        overrides["trace_ranking"] = args.ranking
    agent = _parse_agent(getattr(args, "agent", None), config.agent_backend)
    if agent is not config.agent_backend:
        overrides["agent_backend"] = agent
    return dataclasses.replace(config, **overrides) if overrides else config


def _require_agent(config: RunConfig) -> AgentBackendDescriptor:
    if config.agent_backend is None:
        raise MalformedConfig("no agent backend configured; pass --agent or set agent_backend in the config")
    return config.agent_backend


def cmd_ingest(args: argparse.Namespace) -> int:
    for inst in load_run_set(args.manifests):
        print(
            f"{inst.id}\t{inst.cwe_id}\ttraces={len(inst.traces)}\tground_truth={len(inst.ground_truth)}"
            f"\tguidance={'yes' if inst.cve_guidance else 'no'}"
        )
    return EXIT_OK


def cmd_rank(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    inst = load_instance(args.manifest)
    backend = None
    if config.trace_ranking == "agent":
        backend = make_backend(_require_agent(config))
    for trace in select_traces(inst, backend, config):
        print(trace.trace_id)
    return EXIT_OK


def cmd_guidance(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    inst = load_instance(args.manifest)
    backend = make_backend(_require_agent(config))
    print(generate_cve_guidance(backend, inst, args.cache_dir or config.cache_dir))
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    config = _config_from_args(args)
    descriptor = _require_agent(config)
    instances = load_run_set(args.manifests)
    store = RunStore(args.out)
    backend = make_backend(descriptor, store.root / "session.jsonl")

    if config.generate_guidance:
        instances = [
            inst if inst.cve_guidance else inst.with_guidance(generate_cve_guidance(backend, inst, config.cache_dir))
            for inst in instances
        ]
    store.initialize(config, instances)
    set_process_limit(config.parallel)

    def archive(ref: str, n: int, prompt: str, source: str) -> None:
        store.write_attempt_files(ref, n, prompt, source, config.poc_extension)

    def one(inst):
        return run_instance(inst, backend, config, on_attempt=archive, on_episode=store.write_episode)

    if config.parallel > 1:
        with ThreadPoolExecutor(max_workers=config.parallel) as pool:
            results = list(pool.map(one, instances))
    else:
        results = [one(inst) for inst in instances]

    for inst, episodes in zip(instances, results):
        for ep in episodes:
            status = "ok" if ep.succeeded else ("error" if ep.error else "fail")
            print(f"{ep.episode_ref}\t{status}\tattempts={len(ep.attempts)}")
    return EXIT_OK


def cmd_posthoc(args: argparse.Namespace) -> int:
    store = RunStore(args.run_dir)
    instances = store.load_instances()
    for ep in store.load_episodes():
        if not ep.succeeded:
            continue
        inst = instances.get(ep.instance_id)
        if inst is None or not inst.posthoc_enabled:
            print(f"{ep.episode_ref}\tskipped")
            continue
        if ep.posthoc is not None:
            verdict = ep.posthoc
        else:
            verdict = posthoc_validate(ep, inst.ground_truth)
            store.write_posthoc(ep.episode_ref, verdict)
        print(f"{ep.episode_ref}\t{'hit' if verdict.ground_truth_hit else 'miss'}")
    return EXIT_OK


def cmd_annotate(args: argparse.Namespace) -> int:
    store = RunStore(args.run_dir)
    store.read_meta()
    ann = store.annotate(args.episode_ref, args.category, args.note or "", args.annotator or "")
    print(json.dumps(ann.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    store = RunStore(args.run_dir)
    episodes = store.load_episodes()
    if args.annotations:
        sys.stdout.write(format_distribution(annotation_distribution(store.current_annotations()), args.format))
    elif args.costs:
        sys.stdout.write(format_costs(cost_records(episodes), args.format))
    else:
        sys.stdout.write(format_report(aggregate_report(episodes, args.group_by), args.format))
    return EXIT_OK


def cmd_convert_log(args: argparse.Namespace) -> int:
    adapters = load_adapters(args.adapters)
    text = Path(args.log).read_text(encoding="utf-8", errors="replace")
    sys.stdout.write(convert_log(text, adapters) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pocharness", description="PoC generation and validation harness")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def run_options(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="run config YAML")
        p.add_argument("--agent", help="scripted:<dir> or remote:<url>")
        p.add_argument("--top-k", dest="top_k", type=int)
        p.add_argument("--ranking", choices=("similarity", "agent"))

    p = sub.add_parser("ingest", help="validate instance manifests")
    p.add_argument("manifests", nargs="+")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("rank", help="print the selected trace ids for an instance")
    p.add_argument("manifest")
    run_options(p)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("guidance", help="generate (or read cached) CVE guidance")
    p.add_argument("manifest")
    p.add_argument("--cache-dir")
    run_options(p)
    p.set_defaults(func=cmd_guidance)

    p = sub.add_parser("run", help="run the generate-validate loop over manifests")
    p.add_argument("manifests", nargs="+", help="manifest files or directories of manifests")
    p.add_argument("--out", required=True, help="new run directory")
    run_options(p)
    p.add_argument("--mode", choices=("no_trace", "multi_trace"))
    p.add_argument("--budget", type=int)
    p.add_argument("--timeout", dest="timeout_seconds", type=int, help="seconds per run, overrides manifests")
    p.add_argument("--stop-early", action="store_true", help="stop an instance after its first success")
    p.add_argument("--parallel", type=int, help="instances to run concurrently")
    p.add_argument("--workspace-root")
    p.add_argument("--retain-workspaces", action="store_true")
    p.add_argument("--label", help="config label used by report --group-by config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("posthoc", help="check successful episodes against ground truth")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_posthoc)

    p = sub.add_parser("annotate", help="record a manual category for an episode")
    p.add_argument("run_dir")
    p.add_argument("episode_ref")
    p.add_argument("category", help=", ".join(ANNOTATION_CATEGORIES))
    p.add_argument("--note")
    p.add_argument("--annotator")
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("report", help="print metric tables for a run")
    p.add_argument("run_dir")
    p.add_argument("--group-by", choices=GROUP_KEYS, default="config")
    p.add_argument("--format", choices=("text", "csv", "tsv"), default="text")
    what = p.add_mutually_exclusive_group()
    what.add_argument("--annotations", action="store_true", help="annotation distribution instead")
    what.add_argument("--costs", action="store_true", help="per-episode run costs instead")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("convert-log", help="rewrite a foreign instrumentation log into EVT lines")
    p.add_argument("log")
    p.add_argument("--adapters", required=True, help="adapter config YAML")
    p.set_defaults(func=cmd_convert_log)
    return parser


def _emit_error(exc: BaseException, family: str, code: int) -> None:
    line = {"error": type(exc).__name__, "family": family, "exit_code": code, "message": str(exc)}
    print(json.dumps(line, sort_keys=True), file=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except HarnessError as exc:
        code = EXIT_CODES.get(exc.family, 1)
        _emit_error(exc, exc.family, code)
        return code
    except OSError as exc:
        _emit_error(exc, "input", EXIT_CODES["input"])
        return EXIT_CODES["input"]


if __name__ == "__main__":
    sys.exit(main())
