"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage errors exit 1, DataError and its
subclasses exit 2, NumericFailure exits 3.
"""


class PillardetError(Exception):
    """Base class for package-specific failures."""


class DataError(PillardetError):
    """Unreadable, malformed, or inconsistent input data or configuration."""


class ParseError(DataError):
    """Malformed record in an on-disk file; message carries file position."""


class CheckpointError(DataError):
    """Bad magic, version mismatch, or truncation in a checkpoint file."""


class ConfigError(DataError):
    """Invalid run configuration."""


class NumericFailure(PillardetError):
    """Non-finite values or a failed gradient verification."""
