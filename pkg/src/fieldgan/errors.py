"""Exception types shared across the package."""


class FieldGANError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(FieldGANError):
    """Operands have incompatible shapes; the message names both."""


class DomainError(FieldGANError):
    """Input outside the mathematical domain of an operation (e.g. log of x <= 0)."""


class ContractError(FieldGANError):
    """A caller violated an operation's precondition."""


class GeometryError(FieldGANError):
    """Degenerate camera or scene geometry (e.g. up parallel to the view axis)."""


class ConfigError(FieldGANError):
    """Invalid run configuration; the message carries the offending key path."""


class CheckpointError(FieldGANError):
    """Unreadable, corrupt, or version-mismatched checkpoint file."""


class TrainingError(FieldGANError):
    """Non-finite loss or other fatal condition inside the training loop."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step
