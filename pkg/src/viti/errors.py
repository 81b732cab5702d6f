"""Exception types shared across modules; the CLI maps them to exit codes."""

from viti.linalg import NumericError, ShapeError


class ConfigError(ValueError):
    """Invalid configuration value. ``key`` names the offending field."""

    def __init__(self, key: str, message: str = ""):
        self.key = key
        super().__init__(f"{key}: {message}" if message else key)


class InputError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    pass


class DatasetError(ValueError):
    pass


class FormatError(ValueError):
    """File with the wrong magic or an unsupported format version."""


class CompatibilityError(ValueError):
    """Probe bank and model disagree on configuration."""


__all__ = [
    "CompatibilityError",
    "ConfigError",
    "DatasetError",
    "FormatError",
    "GenerationError",
    "InputError",
    "NumericError",
    "ShapeError",
    "TrainingError",
]
