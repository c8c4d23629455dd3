"""Exception types shared across the package."""


class MoevitError(Exception):
    """Base class for all library-raised errors."""


class ShapeError(MoevitError, ValueError):
    """Tensor shapes violate an operation's contract."""


class ConfigError(MoevitError, ValueError):
    """Invalid or inconsistent configuration values."""


class CheckpointError(MoevitError, RuntimeError):
    """Checkpoint file malformed, incompatible, or mismatched with the model."""


class DataError(MoevitError, RuntimeError):
    """Dataset file missing, truncated, or failing format validation."""
