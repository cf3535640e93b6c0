"""
Errors
------
Exception hierarchy shared by all modules. Each class carries the exit code
main.py returns when the error reaches the command line.
"""


class Coarse2FineError(Exception):
    """Base class for every error raised by this package."""
    exit_code = 2


class ConfigError(Coarse2FineError, ValueError):
    """Bad run configuration: unknown key, wrong type or invalid value."""
    exit_code = 1


class DimensionError(Coarse2FineError, ValueError):
    """Tensor shapes do not fit the operation."""


class LabelError(Coarse2FineError, ValueError):
    """Class index outside [0, num_classes)."""


class FormatError(Coarse2FineError, ValueError):
    """A dataset or checkpoint file is malformed."""


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class LengthMismatchError(FormatError):
    pass


class DatasetInvariantError(FormatError):
    pass


class NumericalError(Coarse2FineError, ArithmeticError):
    """NaN/Inf values, divergence or a solver that did not converge."""
    exit_code = 3


class NoDetectionError(Coarse2FineError, ValueError):
    """Localization mask has no true pixel."""
