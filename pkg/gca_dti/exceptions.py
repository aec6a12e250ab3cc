"""
Error types raised across the package.
Each carries the process exit code the CLI returns for it.
"""


class GcaError(Exception):
    """Base error; exit_code is what the CLI hands back to the shell"""

    exit_code = 1

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class DataError(GcaError):
    exit_code = 2


class ConfigError(GcaError):
    exit_code = 3


class DimensionError(ConfigError):
    """Shapes that cannot be combined"""


class CapabilityError(GcaError):
    """Operation not available for the model's interaction mode"""

    exit_code = 3


class CheckpointError(GcaError):
    exit_code = 3


class NumericError(GcaError):
    exit_code = 4


class SequenceIndexError(DataError, IndexError):
    """Token id outside the vocabulary or position outside the sequence"""


__all__ = [
    'GcaError', 'DataError', 'ConfigError', 'DimensionError', 'CapabilityError',
    'CheckpointError', 'NumericError', 'SequenceIndexError',
]
