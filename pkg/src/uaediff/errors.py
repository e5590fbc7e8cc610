"""Exception hierarchy shared across the package.

Each class maps onto one CLI exit code (see ``uaediff.cli``).
"""


class UaediffError(Exception):
    """Base class for all package errors."""


class ParameterError(UaediffError, ValueError):
    """An argument violates a documented precondition."""


class CapabilityError(UaediffError):
    """An adapter was asked for something it cannot provide (gradients, activations, unconditional branch)."""


class InvariantError(UaediffError):
    """An internal consistency check failed (shape mismatch, mask outside [0, 1], ...)."""


class IngestionError(UaediffError):
    """Dataset or checkpoint could not be located or failed its checksum."""


class GateError(UaediffError):
    """A trained model failed its acceptance gate."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class AttackError(UaediffError):
    """An adapter failure inside the sampling loop."""

    def __init__(self, message, cycle=None, step=None):
        where = f" (cycle={cycle}, step={step})" if cycle is not None else ""
        super().__init__(message + where)
        self.cycle = cycle
        self.step = step
