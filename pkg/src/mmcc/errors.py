"""Exception hierarchy shared across the package."""


class MmccError(Exception):
    """Base class for all package errors."""


class ShapeError(MmccError):
    """Operand shapes are incompatible; message names both shapes."""


class ParameterError(MmccError):
    """A scalar argument is outside its legal range."""


class DataError(MmccError):
    """Malformed or missing input data (corpus files, checkpoints)."""


class NumericalError(MmccError):
    """A training/optimization step produced NaN or Inf."""
