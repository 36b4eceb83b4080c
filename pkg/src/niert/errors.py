"""Exception hierarchy shared across the package."""


class NiertError(Exception):
    """Base class for all package-specific failures."""


class ShapeMismatch(NiertError):
    """Operands disagree on dimensions."""


class SingularSystem(NiertError):
    """Linear system has no usable pivot (and no ridge to rescue it)."""


class NonFiniteValue(NiertError):
    """A numeric evaluation produced NaN or inf where finiteness is required."""


class GraphNotRecorded(NiertError):
    """Backpropagation requested on a value with no recorded computation."""


class DegenerateFunction(NiertError):
    """Sampled function is (numerically) constant and cannot be normalized."""


class RejectedFunction(NiertError):
    """Task sampling failed repeatedly for one function (NaN/inf values)."""


class NonFiniteLoss(NiertError):
    """Training loss became NaN/inf; carries the offending task's source_id."""

    def __init__(self, source_id, message=None):
        self.source_id = source_id
        super().__init__(message or f"non-finite loss on task {source_id!r}")


class CheckpointMismatch(NiertError):
    """Checkpoint contents are inconsistent with the requested model config."""


class FormatError(NiertError):
    """Malformed dataset record; carries the 1-based line number."""

    def __init__(self, line_number, message):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {message}")


class ConfigError(NiertError):
    """Run-config file contains unknown or invalid keys."""
