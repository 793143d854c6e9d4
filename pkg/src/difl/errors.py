"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class ShapeError(ValueError):
    """Tensor shape incompatible with the operation."""


class DomainNotFoundError(KeyError):
    """Domain is not part of the bank."""


class SliceNotFoundError(KeyError):
    """Slice is not part of the index or manifest."""


class ManifestError(ValueError):
    """Malformed dataset manifest."""


class ImageReadError(OSError):
    """Image file missing or undecodable."""


class CheckpointError(RuntimeError):
    """Checkpoint incompatible with the requested configuration."""


class TrainingDivergedError(RuntimeError):
    """A loss became non-finite during training."""


class ScheduleRangeError(ValueError):
    """Epoch outside the configured schedule range."""


class EmptySliceError(ValueError):
    """Slice contains no reference descriptors."""


class IndexFormatError(ValueError):
    """Corrupt or unsupported feature-index file."""


class DegenerateVectorError(ValueError):
    """Zero vector where a direction is required."""


class DegenerateRotationError(ValueError):
    """Zero quaternion where a rotation is required."""
