"""Exception types shared across the package."""


class MGAError(Exception):
    """Base class for all package errors."""


class DimensionError(MGAError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ValidationError(MGAError, ValueError):
    """An input violates a documented precondition."""


class GraphStateError(MGAError, RuntimeError):
    """Backward was requested on a graph that has already been consumed."""


class NonFiniteError(MGAError, FloatingPointError):
    """A NaN or infinity reached a loss computation."""


class FormatError(MGAError, OSError):
    """A file on disk does not follow the expected binary layout."""
