"""Exception types shared across the package."""

from __future__ import annotations


class ValidationError(ValueError):
    """Raised when an input value violates a documented precondition."""


class FormatError(ValueError):
    """Raised when a file's contents do not match the documented layout."""


class VersionError(FormatError):
    """Raised when a checkpoint declares an unsupported format version."""


class ChecksumError(FormatError):
    """Raised when a file's trailing CRC32 does not match its contents."""


class SchemaError(ValueError):
    """Raised when a checkpoint's tensor names differ from the expected set."""


class TrainingDivergedError(RuntimeError):
    """Raised when a training step produces a non-finite loss."""
