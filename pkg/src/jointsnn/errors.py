"""Exception hierarchy.

Every error carries a short machine-readable ``kind`` and the process exit
code the CLI maps it to.
"""


class JointSNNError(Exception):
    kind = "error"
    exit_code = 1


class DimensionError(JointSNNError, ValueError):
    kind = "dimension"
    exit_code = 3


class ConfigError(JointSNNError, ValueError):
    kind = "config"
    exit_code = 2


class DataError(JointSNNError, ValueError):
    kind = "data"
    exit_code = 3


class FormatError(DataError):
    """Malformed input file. ``offset`` is the byte position where parsing failed."""

    kind = "format"

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SerializationError(FormatError):
    kind = "checkpoint"


class StatisticsError(JointSNNError, ValueError):
    kind = "statistics"
    exit_code = 3


class TapeError(JointSNNError, RuntimeError):
    kind = "tape"
    exit_code = 1


class NumericError(JointSNNError, ArithmeticError):
    kind = "numeric"
    exit_code = 4
