"""Exception types raised across the package."""


class SparseVoxError(Exception):
    """Base class for all package errors."""


class FormatError(SparseVoxError, ValueError):
    """A binary file does not follow its expected layout."""


class ParseError(SparseVoxError, ValueError):
    """A text record could not be parsed."""

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class OutOfRangeError(SparseVoxError, IndexError):
    """A coordinate or point falls outside the voxel grid extent."""


class DuplicateVoxelError(SparseVoxError, ValueError):
    """Two voxels share a coordinate."""


class DimensionError(SparseVoxError, ValueError):
    """Array shapes do not conform."""


class NumericError(SparseVoxError, ArithmeticError):
    """NaN or infinity appeared where finite values are required."""


class ConfigError(SparseVoxError, ValueError):
    """Invalid pipeline configuration."""
