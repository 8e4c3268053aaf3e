"""Exception types shared across the package."""


class SaneError(Exception):
    """Base class for all package errors."""


class DimensionError(SaneError, ValueError):
    """Tensor or weight shapes are incompatible."""


class ArgumentError(SaneError, ValueError):
    """A call argument is out of its valid range."""


class ConfigError(SaneError, ValueError):
    """A configuration document or object is invalid."""

    def __init__(self, message, key_path=None):
        super().__init__(message)
        self.key_path = key_path


class FormatError(SaneError, ValueError):
    """An on-disk artifact is malformed or corrupted."""

    def __init__(self, message, tensor_name=None):
        super().__init__(message)
        self.tensor_name = tensor_name


class CapacityError(SaneError, ValueError):
    """A position index exceeds the embedder's table capacity."""


class DataError(SaneError, ValueError):
    """Required data (e.g. a checkpoint) is missing from a collection."""


class TrainingDivergedError(SaneError, RuntimeError):
    """A loss became non-finite during training."""
