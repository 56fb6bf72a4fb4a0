"""Exception hierarchy shared across the package.

CLI exit codes map onto these: ConfigError -> 2, DataError -> 3,
anything else raised during a run -> 4.
"""


class FundusFMError(Exception):
    """Base class for all package errors."""


class ConfigError(FundusFMError):
    """Invalid or inconsistent experiment configuration."""


class DataError(FundusFMError):
    """Problem with input data (manifests, images, masks)."""


class ManifestError(DataError):
    """Malformed or invariant-violating manifest content."""


class CheckpointMissingError(FundusFMError):
    """A required checkpoint is absent from the store.

    Carries the id the caller should produce or register.
    """

    def __init__(self, checkpoint_id: str, message: str | None = None):
        self.checkpoint_id = checkpoint_id
        super().__init__(message or f"checkpoint not found: {checkpoint_id!r}")


class MetricUndefinedError(FundusFMError):
    """A metric was requested on inputs where it has no definition."""


class DegenerateCaseError(FundusFMError):
    """A statistical test hit a degenerate configuration it cannot resolve."""


class TrainingDivergedError(FundusFMError):
    """The validation monitor became NaN during training."""
