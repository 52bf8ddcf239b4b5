"""Exception hierarchy shared by all koji modules."""

from __future__ import annotations


class KojiError(Exception):
    """Base class for every error raised by koji."""

    code = "KojiError"


# -- pipeline structure ------------------------------------------------------


class PipelineError(KojiError):
    """A structural defect in a pipeline document."""

    code = "PipelineError"


class EmptyLabel(PipelineError):
    code = "EmptyLabel"


class DuplicateLabel(PipelineError):
    code = "DuplicateLabel"

    def __init__(self, label: str):
        super().__init__(f"step label {label!r} is used more than once")
        self.label = label


class DuplicateSlotName(PipelineError):
    code = "DuplicateSlotName"

    def __init__(self, step: str, direction: str, name: str):
        super().__init__(f"step {step!r}: {direction} name {name!r} is declared more than once")
        self.step, self.direction, self.name = step, direction, name


class UnknownProvider(PipelineError):
    code = "UnknownProvider"

    def __init__(self, step: str, label: str):
        super().__init__(f"step {step!r} references unknown provider step {label!r}")
        self.step, self.label = step, label


class UnknownProviderOutput(PipelineError):
    code = "UnknownProviderOutput"

    def __init__(self, step: str, provider: str, output: str):
        super().__init__(f"step {step!r} references missing output {output!r} of step {provider!r}")
        self.step, self.provider, self.output = step, provider, output


class MissingInputBinding(PipelineError):
    code = "MissingInputBinding"

    def __init__(self, step: str, slot: str):
        super().__init__(f"step {step!r}: transform input {slot!r} has no provider")
        self.step, self.slot = step, slot


class DuplicateInputBinding(PipelineError):
    code = "DuplicateInputBinding"

    def __init__(self, step: str, slot: str):
        super().__init__(f"step {step!r}: input {slot!r} is bound more than once")
        self.step, self.slot = step, slot


class UnknownInputBinding(PipelineError):
    code = "UnknownInputBinding"

    def __init__(self, step: str, slot: str):
        super().__init__(f"step {step!r}: input {slot!r} is not declared by its transform")
        self.step, self.slot = step, slot


class CycleDetected(PipelineError):
    code = "CycleDetected"

    def __init__(self, path: list[str]):
        super().__init__("dependency cycle: " + " -> ".join(path))
        self.path = path


class ArityViolation(PipelineError):
    code = "ArityViolation"

    def __init__(self, step: str, message: str):
        super().__init__(f"step {step!r}: {message}")
        self.step = step


class DuplicateBoundaryName(PipelineError):
    """Two argument (or two return) steps declare the same name."""

    code = "DuplicateBoundaryName"


class ContainerBindingError(PipelineError):
    code = "ContainerBindingError"


class SubpipelineMappingError(PipelineError):
    code = "SubpipelineMappingError"


class VariantViolation(PipelineError):
    """A oneof-style field has zero or several variants set."""

    code = "VariantViolation"


# -- hashing -----------------------------------------------------------------


class HashError(KojiError):
    code = "HashError"


class DuplicateInputName(HashError):
    code = "DuplicateInputName"


class MissingArgumentHash(HashError):
    code = "MissingArgumentHash"


class UnknownArgument(HashError):
    code = "UnknownArgument"


class UnsupportedEntry(HashError):
    code = "UnsupportedEntry"


class NotFound(HashError, FileNotFoundError):
    code = "NotFound"


# -- cache store -------------------------------------------------------------


class CacheError(KojiError):
    code = "CacheError"


class StoreCorrupt(CacheError):
    code = "StoreCorrupt"


class StoreUnavailable(CacheError):
    code = "StoreUnavailable"


class NotHoldingLock(CacheError):
    code = "NotHoldingLock"


class SourceMissing(CacheError):
    code = "SourceMissing"


class KindMismatch(CacheError):
    code = "KindMismatch"


class LockTimeout(CacheError):
    code = "LockTimeout"


class LockCancelled(CacheError):
    code = "LockCancelled"


# -- execution ---------------------------------------------------------------


class BackendError(KojiError):
    code = "BackendError"


class ImageNotFound(BackendError):
    code = "ImageNotFound"


class SpawnFailure(BackendError):
    code = "SpawnFailure"


class PortUnavailable(BackendError):
    code = "PortUnavailable"


class UnboundName(BackendError):
    code = "UnboundName"


class RunError(KojiError):
    code = "RunError"


class ValidationFailed(RunError):
    code = "ValidationFailed"

    def __init__(self, diagnostics):
        super().__init__("; ".join(str(d) for d in diagnostics))
        self.diagnostics = list(diagnostics)


class TypeCheckFailed(RunError):
    code = "TypeCheckFailed"

    def __init__(self, diagnostics):
        super().__init__("; ".join(str(d) for d in diagnostics))
        self.diagnostics = list(diagnostics)


class MissingArgument(RunError):
    code = "MissingArgument"


class StepExhausted(RunError):
    code = "StepExhausted"

    def __init__(self, label: str):
        super().__init__(f"step {label!r} exhausted its attempts")
        self.label = label


class RunAborted(RunError):
    code = "Aborted"


# -- documents ---------------------------------------------------------------


class DocumentError(KojiError):
    """Raised by the document parser; carries every diagnostic found."""

    code = "DocumentError"

    def __init__(self, diagnostics):
        super().__init__("\n".join(str(d) for d in diagnostics))
        self.diagnostics = list(diagnostics)
