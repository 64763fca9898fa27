"""Exception types shared across the package.

The CLI maps these onto process exit codes, so library code should raise
one of these rather than bare ValueError for anything a user can trigger
from the command line.
"""


class ExportError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ExportError):
    """Invalid manifest or option (bad key, bad value, bad combination)."""


class DataError(ExportError):
    """Malformed input data or file (wav, feature file, manifest)."""


class ChecksumError(DataError):
    """Stored payload checksum does not match the recomputed one."""


class TruncatedFileError(DataError):
    """File ended before the declared payload was read."""


class FrameCountError(DataError):
    """Teacher produced a frame count the downstream consumer cannot accept."""
