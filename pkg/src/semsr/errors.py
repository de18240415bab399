"""Exception hierarchy shared across the package.

Every error raised on a CLI path maps to a distinct exit code (see cli.py),
so failures stay machine-parsable.
"""


class SemsrError(Exception):
    """Base class for all package errors."""


class ConfigError(SemsrError):
    """Invalid or inconsistent run configuration."""


class DataError(SemsrError):
    """Dataset build/load failure; message carries the offending path or tile."""


class ShapeError(SemsrError):
    """Tensor shape or model/config mismatch."""


class CheckpointError(SemsrError):
    """Unreadable, version-incompatible, or shape-incompatible checkpoint."""


class PrerequisiteError(SemsrError):
    """A pipeline stage was invoked before the stage it depends on."""

    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


class TrainingError(SemsrError):
    """Training aborted (non-finite loss, divergence guard, quality floor)."""
