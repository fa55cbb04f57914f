"""Exception hierarchy.

Each class carries a stable ``code`` used as the CLI exit status, so failures
can be told apart by scripts without parsing messages.
"""


class M3AEError(Exception):
    code = 1


class ShapeError(M3AEError, ValueError):
    code = 3


class ConfigError(M3AEError, ValueError):
    code = 4


class VolumeFormatError(M3AEError, ValueError):
    code = 5


class CheckpointError(M3AEError, ValueError):
    code = 6


class DataError(M3AEError, ValueError):
    code = 7


class NonFiniteError(M3AEError, FloatingPointError):
    code = 8


class MetricError(M3AEError, ValueError):
    code = 9


class UsageError(M3AEError):
    """Bad command-line usage (unknown flag, missing argument)."""

    code = 2
