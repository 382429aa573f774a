"""Method-granularity code locations and the matching rule shared by every
coverage, sink and post-hoc check."""

from __future__ import annotations

import posixpath
import re
from dataclasses import dataclass
from typing import Any

_CLASS_SEP = re.compile(r"[.$]")


@dataclass(frozen=True)
class CodeLocation:
    file: str
    class_fqn: str
    method: str
    line: int | None = None

    def qualified_name(self) -> str:
        return f"{self.class_fqn}.{self.method}" if self.class_fqn else self.method

    def file_ref(self) -> str:
        return f"{self.file}:{self.line}" if self.line is not None else self.file

    def to_dict(self) -> dict[str, Any]:
        return {"file": self.file, "class_fqn": self.class_fqn, "method": self.method, "line": self.line}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> CodeLocation:
        line = data.get("line")
        return cls(
            file=str(data.get("file") or ""),
            class_fqn=str(data.get("class_fqn") or ""),
            method=str(data.get("method") or ""),
            line=int(line) if line is not None else None,
        )


def split_qualified(name: str) -> tuple[str, str]:
    """Split ``a.b.C.method`` into (``a.b.C``, ``method``); no dot means no class."""
    cls, _, method = name.rpartition(".")
    return cls, method


def normalize_path(path: str) -> tuple[str, ...]:
    p = path.replace("\\", "/").strip()
    if not p:
        return ()
    p = posixpath.normpath(p)
    return tuple(part for part in p.split("/") if part not in ("", "."))


def _normalize_class(name: str) -> str:
    return name.replace("$", ".")


def same_file(a: str, b: str) -> bool:
    """Paths match when one is a component-wise suffix of the other.

    Instrumentation usually reports bare source file names while static
    traces carry repository-relative paths.
    """
    pa, pb = normalize_path(a), normalize_path(b)
    if not pa or not pb:
        return False
    n = min(len(pa), len(pb))
    return pa[-n:] == pb[-n:]


def match_location(step_loc: CodeLocation, event_loc: CodeLocation) -> bool:
    """True iff both name the same method. Line numbers are ignored."""
    if step_loc.method != event_loc.method:
        return False
    if step_loc.class_fqn and event_loc.class_fqn:
        return _normalize_class(step_loc.class_fqn) == _normalize_class(event_loc.class_fqn)
    return same_file(step_loc.file, event_loc.file)


def location_tokens(loc: CodeLocation) -> frozenset[str]:
    """Similarity tokens: file stem, class name segments, method name."""
    tokens: set[str] = set()
    parts = normalize_path(loc.file)
    if parts:
        stem = posixpath.splitext(parts[-1])[0]
        if stem:
            tokens.add(stem)
    tokens.update(seg for seg in _CLASS_SEP.split(loc.class_fqn) if seg)
    if loc.method:
        tokens.add(loc.method)
    return frozenset(tokens)
