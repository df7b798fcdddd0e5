"""Exception hierarchy.

The CLI maps the three top-level families onto exit codes:
``ConfigError`` -> 1, ``DataError`` -> 2, ``NumericError`` -> 3.
"""


class QEError(Exception):
    """Base class for all package errors."""

    kind = "error"


class ConfigError(QEError, ValueError):
    kind = "config"


class InvalidArgumentError(ConfigError):
    kind = "invalid-argument"


class ShapeError(ConfigError):
    kind = "shape"


class CapacityError(ConfigError):
    kind = "capacity"


class DataError(QEError, ValueError):
    kind = "data"


class FormatError(DataError):
    kind = "format"


class MagicError(FormatError):
    kind = "magic"


class VersionError(FormatError):
    kind = "version"


class TruncationError(FormatError):
    kind = "truncated"


class SchemaError(FormatError):
    kind = "schema"


class NumericError(QEError, ArithmeticError):
    kind = "numeric"


class DegenerateError(NumericError):
    kind = "degenerate"


class ConvergenceError(NumericError):
    kind = "convergence"

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual
