"""Shared exception types.

Every module raises one of these (or a builtin like IndexError) so the CLI
can map failures onto its exit-code contract.
"""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """Numeric argument outside the mathematically valid domain."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(ValueError):
    """Invalid or incompatible configuration."""


class GenerationError(ValueError):
    """Phantom case construction violated an invariant."""


class NumericalError(ArithmeticError):
    """Non-finite value encountered where a finite one is required."""
