"""On-disk layout of a run directory.

    <run>/run.json                  config snapshot and schema version
    <run>/manifests/<id>.yaml       instance snapshots (+ .traces files)
    <run>/episodes/<ref>.json       one EpisodeResult per file, written once
    <run>/posthoc/<ref>.json        post-hoc verdicts, written by a later pass
    <run>/annotations.jsonl         append-only manual annotations
    <run>/session.jsonl             agent call log
    <run>/attempts/<ref>/           prompt_<n>.txt and poc_<n>.txt per attempt
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable

from filelock import FileLock

from .errors import StoreError, UnknownCategory, UnknownEpisode
from .instance_model import ProblemInstance, RunConfig, dump_instance, load_instance, run_config_to_dict
from .validation_loop import EpisodeResult, PostHocVerdict

SCHEMA_VERSION = 1

ANNOTATION_CATEGORIES = (
    "bad_validation",
    "hardcoded",
    "non_malicious",
    "simulation",
    "force_try",
    "unrelated_description",
    "unrelated_trace",
    "valid",
)


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", name)


def dump_json(data: Any) -> str:
    return json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


@dataclass(frozen=True)
class FailureAnnotation:
    episode_ref: str
    category: str
    note: str
    annotator: str
    timestamp: str

    def to_dict(self) -> dict:
        return {
            "episode_ref": self.episode_ref,
            "category": self.category,
            "note": self.note,
            "annotator": self.annotator,
            "timestamp": self.timestamp,
        }


class RunStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    # layout
    @property
    def episodes_dir(self) -> Path:
        return self.root / "episodes"

    @property
    def posthoc_dir(self) -> Path:
        return self.root / "posthoc"

    @property
    def manifests_dir(self) -> Path:
        return self.root / "manifests"

    @property
    def annotations_path(self) -> Path:
        return self.root / "annotations.jsonl"

    @property
    def session_log_path(self) -> Path:
        return self.root / "session.jsonl"

    def exists(self) -> bool:
        return (self.root / "run.json").is_file()

    # writing
    def initialize(self, config: RunConfig, instances: Iterable[ProblemInstance]) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        run_json = self.root / "run.json"
        if run_json.exists():
            raise StoreError(f"{self.root} already holds a run; use a fresh directory")
        for d in (self.episodes_dir, self.posthoc_dir, self.manifests_dir):
            d.mkdir(exist_ok=True)
        ids = []
        for inst in instances:
            dump_instance(inst, self.manifests_dir / f"{_safe(inst.id)}.yaml")
            ids.append(inst.id)
        meta = {"schema_version": SCHEMA_VERSION, "config": run_config_to_dict(config), "instances": ids}
        run_json.write_text(dump_json(meta), encoding="utf-8")

    def write_episode(self, episode: EpisodeResult) -> Path:
        path = self.episodes_dir / f"{episode.episode_ref}.json"
        if path.exists():
            raise StoreError(f"episode file already exists: {path}")
        data = {"schema_version": SCHEMA_VERSION, **episode.to_dict()}
        path.write_text(dump_json(data), encoding="utf-8")
        return path

    def write_attempt_files(self, ref: str, index: int, prompt: str, source: str, extension: str) -> None:
        d = self.root / "attempts" / ref
        d.mkdir(parents=True, exist_ok=True)
        (d / f"prompt_{index}.txt").write_text(prompt, encoding="utf-8")
        (d / f"poc_{index}{extension}").write_text(source, encoding="utf-8")

    def write_posthoc(self, ref: str, verdict: PostHocVerdict) -> Path:
        path = self.posthoc_dir / f"{ref}.json"
        if path.exists():
            raise StoreError(f"post-hoc verdict already recorded for {ref}")
        self.posthoc_dir.mkdir(parents=True, exist_ok=True)
        path.write_text(dump_json({"schema_version": SCHEMA_VERSION, "episode_ref": ref, **verdict.to_dict()}),
                        encoding="utf-8")
        return path

    # reading
    def read_meta(self) -> dict:
        if not self.exists():
            raise StoreError(f"not a run directory: {self.root}")
        return json.loads((self.root / "run.json").read_text(encoding="utf-8"))

    def episode_refs(self) -> list[str]:
        return sorted(p.stem for p in self.episodes_dir.glob("*.json"))

    def load_episode(self, ref: str) -> EpisodeResult:
        path = self.episodes_dir / f"{ref}.json"
        if not path.is_file():
            raise UnknownEpisode(f"no episode {ref!r} in {self.root}")
        data = json.loads(path.read_text(encoding="utf-8"))
        if data.get("schema_version") != SCHEMA_VERSION:
            raise StoreError(f"{path}: unsupported schema version {data.get('schema_version')!r}")
        episode = EpisodeResult.from_dict(data)
        posthoc_path = self.posthoc_dir / f"{ref}.json"
        if posthoc_path.is_file():
            episode = replace(episode, posthoc=PostHocVerdict.from_dict(json.loads(posthoc_path.read_text("utf-8"))))
        return episode

    def load_episodes(self) -> list[EpisodeResult]:
        self.read_meta()
        return [self.load_episode(ref) for ref in self.episode_refs()]

    def load_instances(self) -> dict[str, ProblemInstance]:
        out = {}
        for path in sorted(self.manifests_dir.glob("*.yaml")):
            inst = load_instance(path)
            out[inst.id] = inst
        return out

    # annotations
    def annotate(
        self,
        ref: str,
        category: str,
        note: str = "",
        annotator: str = "",
        *,
        vocabulary: Iterable[str] = ANNOTATION_CATEGORIES,
        timestamp: str | None = None,
    ) -> FailureAnnotation:
        if category not in tuple(vocabulary):
            raise UnknownCategory(f"unknown annotation category {category!r}")
        if not (self.episodes_dir / f"{ref}.json").is_file():
            raise UnknownEpisode(f"no episode {ref!r} in {self.root}")
        ann = FailureAnnotation(
            ref, category, note, annotator, timestamp or datetime.now(timezone.utc).isoformat(timespec="seconds")
        )
        with FileLock(str(self.annotations_path) + ".lock"):
            with self.annotations_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(ann.to_dict(), sort_keys=True) + "\n")
        return ann

    def annotation_history(self) -> list[FailureAnnotation]:
        if not self.annotations_path.is_file():
            return []
        out = []
        for line in self.annotations_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                out.append(FailureAnnotation(**json.loads(line)))
        return out

    def current_annotations(self) -> dict[str, FailureAnnotation]:
        """Latest annotation per episode; later lines supersede earlier ones."""
        current: dict[str, FailureAnnotation] = {}
        for ann in self.annotation_history():
            current[ann.episode_ref] = ann
        return current

