"""Exception types shared across the package."""


class DriveWMError(Exception):
    """Base class for package errors."""


class ValidationError(DriveWMError):
    """Malformed input data or configuration."""


class ScenarioValidationError(ValidationError):
    """A scenario or one of its tracks violates the file contract."""


class GenerationError(DriveWMError):
    """Scenario generation could not satisfy the requested parameters."""


class UsageError(DriveWMError):
    """An API was called out of sequence (e.g. step after done)."""


class EmptyStoreError(DriveWMError):
    """Sampling was requested before any finalized episode exists."""


class TrainingError(DriveWMError):
    """Numeric failure during optimization (NaN/Inf loss component)."""


class CheckpointVersionError(DriveWMError):
    """Checkpoint format or config does not match this code version."""
