"""Exception types shared across the package."""


class SSVError(Exception):
    """Base class for package-specific errors."""


class ConfigError(SSVError, ValueError):
    """Invalid configuration value or malformed config document."""


class ShapeError(SSVError, ValueError):
    """Array/tensor shape does not match the expected contract."""


class CheckpointError(SSVError, RuntimeError):
    """Checkpoint file is corrupt, truncated, or fails its checksum."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported by this build."""


class TrainingDivergedError(SSVError, RuntimeError):
    """A loss component became non-finite; the run is aborted to stay reproducible."""
