"""Shared exception types."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """Input values are outside the operation's domain (empty cloud, k > n, ...)."""


class ContractError(RuntimeError):
    """An API contract was violated (non-scalar loss, mismatched grids, ...)."""


class ConfigError(ValueError):
    """Invalid or contradictory configuration."""


class NumericalAbort(RuntimeError):
    """Training hit a non-finite value and was aborted."""
