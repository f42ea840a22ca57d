"""Exception hierarchy. Each class maps to a CLI exit code."""


class MLDError(Exception):
    exit_code = 1


class ConfigError(MLDError, ValueError):
    exit_code = 2


class ShapeError(MLDError, ValueError):
    exit_code = 2


class NumericError(MLDError, ArithmeticError):
    """Raised when a NaN or Inf shows up in a loss or a sampler state."""

    exit_code = 3


class CheckpointError(MLDError, IOError):
    exit_code = 4
