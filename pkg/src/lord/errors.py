"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ValidationError(ValueError):
    """An argument or configuration value violates a precondition."""


class CheckpointError(RuntimeError):
    """A checkpoint file could not be read."""


class CheckpointMagicError(CheckpointError):
    """File does not start with the expected magic bytes."""


class CheckpointVersionError(CheckpointError):
    """File carries an unsupported format version."""


class CheckpointCorruptError(CheckpointError):
    """File is truncated or its content hash does not match."""
