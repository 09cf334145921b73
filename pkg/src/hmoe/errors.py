"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigurationError(ValueError):
    """A configuration value violates its documented invariant."""


class ContractError(ValueError):
    """An operation was called outside its documented contract."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


class SchemaError(ValueError):
    """An exported telemetry file does not match the documented schema."""


class CheckpointFormatError(ValueError):
    """A checkpoint file has an unknown magic or format version."""
