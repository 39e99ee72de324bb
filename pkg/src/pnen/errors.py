"""Exception types shared across the package.

The CLI maps each class onto a process exit code.
"""


class PnenError(Exception):
    exit_code = 1


class ConfigError(PnenError, ValueError):
    """Shape mismatch, bad hyperparameter or schema violation."""

    exit_code = 2


class DataError(PnenError):
    """Missing or malformed input file."""

    exit_code = 3


class NumericError(PnenError, ArithmeticError):
    """A NaN/Inf appeared in a result computed from finite inputs."""

    exit_code = 4
