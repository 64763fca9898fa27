"""Exception types shared across the package.

The CLI maps these onto process exit codes, so library code should raise
one of these (or a subclass) rather than bare ValueError for anything a
user can trigger from the command line.
"""


class SvMixerError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SvMixerError):
    """Invalid or inconsistent configuration (bad field, bad value, bad combination)."""


class ShapeError(SvMixerError):
    """Tensor shape mismatch. Message carries both offending shapes."""


class NonFiniteError(SvMixerError):
    """An operation produced NaN or Inf. Never silently propagated."""


class DataError(SvMixerError):
    """Malformed input data or file (wav, feature file, checkpoint, trial list)."""


class ChecksumError(DataError):
    """Stored payload checksum does not match the recomputed one."""


class TruncatedFileError(DataError):
    """File ended before the declared payload was read."""


class CheckFailure(SvMixerError):
    """A numerical self-check (gradient check, census verification) failed."""
