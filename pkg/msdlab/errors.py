"""Exception hierarchy shared by the library and the command-line driver.

Every class carries the exit code the CLI reports for it.
"""

from __future__ import annotations


class MsdError(Exception):
    """Base class for all errors raised by msdlab."""

    exit_code = 1


class ValidationError(MsdError, ValueError):
    """Caller-supplied input violates a precondition."""

    exit_code = 2


class ShapeError(ValidationError):
    """Array dimensions disagree with the network or with each other."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message if layer is None else f"layer {layer}: {message}")
        self.layer = layer


class ConfigError(ValidationError):
    """A configuration field is unknown, mistyped, or out of range."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class StageOrderError(ValidationError):
    """Training stages requested or advanced out of TSM -> DM -> ADM order."""


class PartitionError(ValidationError):
    """A condition partition is not total, not disjoint, or leaves a student empty."""


class NumericalError(MsdError, ArithmeticError):
    """A loss, gradient or sampler state became non-finite or degenerate."""

    exit_code = 4

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class ArtifactError(MsdError):
    """A checkpoint or dataset file cannot be read back."""

    exit_code = 3


class CorruptHeaderError(ArtifactError):
    """Magic bytes or metadata block are unreadable."""


class TruncatedFileError(ArtifactError):
    """The file ends before its declared payload."""


class UnknownVersionError(ArtifactError):
    """The file declares a format version this build does not read."""


class RoleMismatchError(ArtifactError):
    """A checkpoint holds a different role than the caller expected."""

    exit_code = 2
