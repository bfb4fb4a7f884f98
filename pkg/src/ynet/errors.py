"""Structured error types shared across the package."""

from __future__ import annotations


class YNetError(Exception):
    """Base class for all package errors."""


class ShapeError(YNetError):
    """Tensor shapes inconsistent with an operation's contract."""


class ConfigError(YNetError):
    """Invalid or mutually inconsistent configuration values."""


class DatasetError(YNetError):
    """A dataset file or record violates the on-disk contract."""

    def __init__(self, message: str, path: str | None = None) -> None:
        super().__init__(message if path is None else f"{message} ({path})")
        self.path = path


class CheckpointError(YNetError):
    """Checkpoint file is malformed, truncated, or version-mismatched."""


class IndexFormatError(YNetError):
    """Hash-index file is malformed, truncated, or version-mismatched."""


class TrainingDiverged(YNetError):
    """Non-finite loss encountered; carries a diagnostic batch record."""

    def __init__(self, message: str, diagnostic: dict | None = None) -> None:
        super().__init__(message)
        self.diagnostic = diagnostic or {}
