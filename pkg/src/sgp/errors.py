"""Exception hierarchy shared by all modules."""


class SGPError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(SGPError, ValueError):
    """Operands have incompatible shapes."""


class DegenerateInputError(SGPError, ValueError):
    """Input is valid in shape but carries no usable signal (e.g. all-zero)."""


class NumericalError(SGPError, ArithmeticError):
    """A numerical routine failed (non-convergence, NaN loss, ...)."""


class ConsistencyError(SGPError, RuntimeError):
    """An internal invariant of the memory update was violated."""


class ConfigError(SGPError, ValueError):
    """Invalid configuration or parameters."""


class FormatError(SGPError, ValueError):
    """A file on disk does not follow its documented format."""
