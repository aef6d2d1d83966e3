"""Exception hierarchy.

Every error carries a short machine-readable ``category`` that the CLI maps
to its exit code.
"""


class UrsctError(Exception):
    category = "error"
    exit_code = 1


class UsageError(UrsctError):
    category = "usage"
    exit_code = 2


class ConfigError(UrsctError, ValueError):
    category = "config"
    exit_code = 3


class DimensionError(ConfigError):
    """Tensor shapes are incompatible with the requested operation."""


class DataError(UrsctError):
    category = "data"
    exit_code = 4


class FileIOError(DataError, OSError):
    pass


class FormatError(DataError):
    """A checkpoint or config file is malformed."""


class NumericError(UrsctError, ArithmeticError):
    category = "numeric"
    exit_code = 5
