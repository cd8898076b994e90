"""Exception hierarchy shared across the package.

Every error raised on purpose derives from UasegError so callers (and the
command-line layer) can distinguish expected failures from bugs.
"""


class UasegError(Exception):
    """Base class for all package errors."""


class ConfigurationError(UasegError):
    """A config value violates its documented invariant."""


class DimensionError(UasegError):
    """Array shapes are incompatible with the requested operation."""


class InputError(UasegError):
    """Input data is invalid (non-finite values, wrong domain)."""


class GraphError(UasegError):
    """A gradient was requested for a value not connected to the graph."""


class LabelError(UasegError):
    """A label mask contains out-of-range classes or no usable labels."""


class EmptyBatchError(UasegError):
    """An operation that needs labeled pixels received none."""


class GenerationError(UasegError):
    """Synthetic data generation could not satisfy its constraints."""


class NumericError(UasegError):
    """A numeric failure (NaN/Inf) was detected during training."""


class FormatError(UasegError):
    """A binary file does not match its documented format.

    Carries the byte offset at which the problem was detected.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
