"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """A parameter or configuration value is invalid."""


class ContractError(RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class TapeError(ContractError):
    """The autodiff tape was consumed or is otherwise unusable."""


class IngestionError(ValueError):
    """Input data could not be read or validated."""


class NumericError(FloatingPointError):
    """A computation produced non-finite values."""


class PersistenceError(ValueError):
    """Serialized state is corrupt, truncated or incompatible."""
