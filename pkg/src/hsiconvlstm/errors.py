"""Exceptions shared by the file readers and model loading."""

from .tensor import DimensionError, NumericError


class FormatError(ValueError):
    """A binary or text file does not follow its declared layout."""


class ChecksumError(FormatError):
    """Stored CRC-32 does not match the payload."""


class VersionError(FormatError):
    pass


class SizeMismatchError(ValueError):
    """Two rasters that must share extents do not."""


class SpecMismatchError(ValueError):
    """A checkpoint does not belong to the requested model."""


__all__ = [
    "ChecksumError",
    "DimensionError",
    "FormatError",
    "NumericError",
    "SizeMismatchError",
    "SpecMismatchError",
    "VersionError",
]
