"""Exception types shared across the package."""


class GpodeError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(GpodeError):
    """Operand shapes are incompatible with the requested operation."""


class NumericalError(GpodeError):
    """A numerical operation failed (non-PD factorization, non-finite values)."""


class ContractError(GpodeError):
    """A caller violated an API precondition."""


class ConfigError(GpodeError):
    """An experiment configuration is malformed or inconsistent."""
