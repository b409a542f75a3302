"""Exception hierarchy shared by every subsystem.

The CLI maps each class to a stable process exit code.
"""


class PCDError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigurationError(PCDError):
    """Invalid shapes, arguments, or model/config combinations."""

    exit_code = 1


class DataError(PCDError):
    """Malformed or missing data: manifests, annotations, images."""

    exit_code = 2


class NumericError(PCDError):
    """A NaN or Inf appeared in a forward or backward pass."""

    exit_code = 3


class DegenerateBatchError(ConfigurationError):
    """Batch norm in train mode with a single element per channel."""


class LabelCollisionError(DataError):
    """Two visible landmarks rasterize onto the same pixel."""


class TreeMismatchError(DataError):
    """Checkpoint and manifest were built for different landmark trees."""

    exit_code = 4
