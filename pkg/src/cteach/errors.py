"""Shared exception types."""


class CteachError(Exception):
    """Base class for all package errors."""


class ShapeError(CteachError, ValueError):
    """Operands have incompatible dimensions."""


class NumericError(CteachError, ArithmeticError):
    """Non-finite values or numerically invalid input."""


class ConfigError(CteachError, ValueError):
    """Invalid configuration value."""


class DataError(CteachError, ValueError):
    """Malformed or inconsistent data (files, label ids, targets)."""


class UsageError(CteachError, RuntimeError):
    """API contract violation (wrong call order, reused tape, ...)."""


class InternalError(CteachError, RuntimeError):
    """A postcondition that should hold by construction was violated."""
