class DimensionError(ValueError):
    """Operand shapes do not conform."""


class ContractError(RuntimeError):
    """A call violated an op precondition that is not about shapes."""


class ConfigError(ValueError):
    """Configuration values are inconsistent with each other or with the data."""
