"""Exception hierarchy shared across the simulator."""

from __future__ import annotations


class DPLoRAError(Exception):
    """Base class for all simulator errors."""


class ShapeError(DPLoRAError, ValueError):
    """Operand shapes do not conform."""


class ParameterError(DPLoRAError, ValueError):
    """A scalar argument is outside its valid range."""


class NumericalError(DPLoRAError, FloatingPointError):
    """An operation produced a non-finite value."""


class AccountantInapplicable(DPLoRAError, ValueError):
    """The moments bound cannot be applied to the requested configuration."""


class ProtocolError(DPLoRAError, RuntimeError):
    """Federation messages are inconsistent (shapes, weights, ordering)."""


class ConfigError(DPLoRAError, ValueError):
    """Invalid or inconsistent run configuration."""

    def __init__(self, key: str, message: str) -> None:
        self.key = key
        super().__init__(f"{key}: {message}")
