"""Exception hierarchy shared across the package.

The command-line layer maps these onto exit codes: configuration and
argument problems exit 2, storage problems exit 3, violated runtime
contracts exit 4.
"""


class FoleyAdapterError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(FoleyAdapterError):
    """Invalid configuration value or argument."""


class DimensionError(FoleyAdapterError):
    """Tensor shapes do not satisfy an operation's contract."""


class AlignmentError(FoleyAdapterError):
    """Temporal grids disagree where exact alignment is required."""


class ContractError(FoleyAdapterError):
    """A runtime invariant was violated (e.g. frozen parameters changed)."""


class DataError(FoleyAdapterError):
    """Dataset contents are missing or unusable."""


class StoreError(FoleyAdapterError):
    """Problem reading or writing a binary artifact."""


class CorruptionError(StoreError):
    """Stored bytes fail the structural audit."""


class UnsupportedVersionError(StoreError):
    """Artifact was written by an unknown future format version."""
