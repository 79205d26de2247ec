"""Error taxonomy shared by every module.

Three failure categories: shapes that cannot combine, configurations that
cannot be built, and call contracts that were violated at runtime.
"""


class DimensionError(ValueError):
    """Operands have incompatible shapes (e.g. matmul inner extents)."""


class ConfigurationError(ValueError):
    """A configuration value is invalid or inconsistent with the data."""


class ContractError(ValueError):
    """A call precondition was violated (bad label, non-scalar loss, ...)."""
