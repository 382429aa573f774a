"""Exception hierarchy.

Every harness error carries a ``family`` used by the CLI to pick an exit
status, so callers can catch ``HarnessError`` once and still report precisely.
"""

from __future__ import annotations


class HarnessError(Exception):
    family = "internal"


# input: manifests, configs, trace files


class InputError(HarnessError):
    family = "input"


class MissingField(InputError):
    def __init__(self, field: str, source: str = ""):
        self.field = field
        where = f" in {source}" if source else ""
        super().__init__(f"missing required field {field!r}{where}")


class MalformedManifest(InputError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        pos = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{pos}")


class DanglingReference(InputError):
    def __init__(self, ref: str, kind: str = "path"):
        self.ref = ref
        super().__init__(f"unresolvable {kind} reference: {ref}")


class DuplicateInstance(InputError):
    def __init__(self, instance_id: str):
        self.instance_id = instance_id
        super().__init__(f"duplicate instance id {instance_id!r} in run set")


class MalformedConfig(InputError):
    pass


class MalformedTrace(InputError):
    def __init__(self, message: str, line: int):
        self.line = line
        super().__init__(f"line {line}: {message}")


class EmptyFile(InputError):
    pass


class InvariantViolation(InputError):
    def __init__(self, message: str, trace_id: str | None = None):
        self.trace_id = trace_id
        prefix = f"trace {trace_id!r}: " if trace_id else ""
        super().__init__(prefix + message)


class MalformedEvent(InputError):
    def __init__(self, message: str, line: int):
        self.line = line
        super().__init__(f"line {line}: {message}")


# prompts


class PromptError(HarnessError):
    family = "prompt"


class MissingContext(PromptError):
    def __init__(self, field: str):
        self.field = field
        super().__init__(f"instance lacks {field!r} required for this prompt")


class EmptyTraceSet(PromptError):
    pass


class CriteriaMismatch(PromptError):
    pass


class TemplateError(PromptError):
    pass


# agent backends


class AgentError(HarnessError):
    family = "agent"


class BackendUnavailable(AgentError):
    pass


class MalformedResponse(AgentError):
    pass


class FixtureMissing(AgentError):
    pass


# execution


class ExecutionError(HarnessError):
    family = "execution"


class WorkspaceError(ExecutionError):
    pass


class CommandSpawnError(ExecutionError):
    pass


class MissingPlaceholder(ExecutionError):
    pass


# validation / run store


class ValidationError(HarnessError):
    family = "validation"


class CalledOnValidVerdict(ValidationError):
    pass


class EpisodeNotSuccessful(ValidationError):
    pass


class NoGroundTruth(ValidationError):
    pass


class StoreError(HarnessError):
    family = "store"


class UnknownEpisode(StoreError):
    pass


class UnknownCategory(StoreError):
    pass
