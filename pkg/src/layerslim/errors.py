"""Exception types shared across the package.

Every domain error derives from LayerslimError so the CLI can map it to a
nonzero exit with a module-qualified message.  Types that signal misuse of an
API also derive from the matching builtin so callers can catch idiomatically.
"""


class LayerslimError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(LayerslimError, ValueError):
    """An array had the wrong rank, shape, or dtype for the operation."""


class ParameterError(LayerslimError, ValueError):
    """An argument violated a precondition (range, emptiness, alignment)."""


class NumericError(LayerslimError, ArithmeticError):
    """An iterative routine failed to converge or produced non-finite values."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class ArchiveError(LayerslimError, ValueError):
    """A tensor archive is malformed.  Carries the byte offset of the fault."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CorpusError(LayerslimError, ValueError):
    """A calibration corpus file or record could not be used."""


class StateError(LayerslimError, RuntimeError):
    """An object was used before the state it needs was populated."""


class DegenerateGapError(LayerslimError, ArithmeticError):
    """The difference matrix between two layers is numerically zero."""
