"""Exception types shared across the lab."""


class LabError(Exception):
    """Base class for all errors raised by balab."""


class ArgumentError(LabError, ValueError):
    """An argument violates a documented precondition."""


class DimensionError(ArgumentError):
    """Tensor shapes are incompatible."""


class NumericError(LabError, ArithmeticError):
    """A computation produced or received a non-finite value."""


class StateError(LabError, RuntimeError):
    """Saved state (e.g. attention weights) does not match the requested operation."""
