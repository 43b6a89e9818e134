"""Exception hierarchy for the toolkit.

Library code raises these; only the CLI turns them into exit codes.
"""


class CasUNextError(Exception):
    """Base class for every error raised by casunext."""


class ShapeError(CasUNextError, ValueError):
    """Incompatible tensor shapes, channel counts or spatial sizes."""


class GradientError(CasUNextError, RuntimeError):
    """Invalid use of reverse-mode differentiation."""


class ConfigError(CasUNextError, ValueError):
    """Invalid model, training, geometry, phantom or file configuration."""


class CheckpointError(CasUNextError, OSError):
    """Missing, corrupt or mismatched checkpoint."""


class PreprocessError(CasUNextError, ValueError):
    """Image cannot be brought into the cascade frame."""


class TrainingDivergedError(CasUNextError, RuntimeError):
    """Loss became NaN or infinite during training."""


class DataError(CasUNextError, OSError):
    """Unreadable image file or empty dataset directory."""
