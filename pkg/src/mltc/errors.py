"""Exception types shared across the package."""


class MltcError(Exception):
    """Base class for all package errors."""


class DimensionError(MltcError, ValueError):
    """Operand shapes do not agree."""


class ContractError(MltcError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(MltcError, ValueError):
    """A model, method or experiment configuration is invalid."""


class DataError(MltcError, ValueError):
    """Input data (labels, records) is malformed or unknown."""


class SpecError(MltcError, ValueError):
    """A synthetic dataset specification cannot be realised."""


class TrainingError(MltcError, RuntimeError):
    """Training diverged (non-finite loss)."""
