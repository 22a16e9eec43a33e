"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand dimensions do not agree."""


class ConfigError(ValueError):
    """A configuration value is out of its allowed range."""


class ContractError(RuntimeError):
    """An operation was called in a state its contract forbids."""


class GenerationError(RuntimeError):
    """A prompt or scene generator could not satisfy its constraints."""


class TrainingError(RuntimeError):
    """Optimisation diverged (non-finite loss)."""


class ChecksumError(RuntimeError):
    """Frozen weights changed when they must not have."""
