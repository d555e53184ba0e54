"""Exception hierarchy shared across the package.

Every failure surfaced to callers is a subclass of ``FedsslError`` so the
CLI can map failure classes onto exit codes.
"""


class FedsslError(Exception):
    """Base class for all package errors."""


class DimensionError(FedsslError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(FedsslError):
    """A documented precondition was violated by the caller."""


class ValidationError(FedsslError):
    """A configuration value or parameter is outside its allowed range."""


class ConfigurationError(FedsslError):
    """A run-level configuration is inconsistent with the data it is applied to."""


class AggregationError(FedsslError):
    """Snapshots passed to an aggregation step do not line up."""


class FormatError(FedsslError):
    """A serialized artifact is malformed; carries the byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DataIOError(FedsslError):
    """Reading or writing a dataset artifact failed; carries the path."""

    def __init__(self, message: str, path=None):
        if path is not None:
            message = f"{message}: {path}"
        super().__init__(message)
        self.path = path


class NumericError(FedsslError):
    """A non-finite value appeared where a finite one is guaranteed."""
