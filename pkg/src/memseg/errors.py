"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation's contract."""


class ContractError(ValueError):
    """A call violates an operation's pre- or post-conditions."""


class DomainError(ValueError):
    """An input leaves a guarded numeric domain (division by zero, log of a non-positive)."""


class ConfigError(ValueError):
    """Invalid or unknown configuration value."""


class WiringError(ValueError):
    """An adapter is paired with a layer it does not target."""


class SamplingError(RuntimeError):
    """An episode cannot be drawn from the index as requested."""


class IngestionError(RuntimeError):
    """A dataset directory violates the on-disk format."""


class ProtocolError(ValueError):
    """An evaluation protocol constraint is violated."""


class TrainingError(RuntimeError):
    """Training aborted. Carries the optimizer step at which it failed."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class CheckInvalidError(RuntimeError):
    """A verification probe could not produce a meaningful result."""
