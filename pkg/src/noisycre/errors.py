"""Exception hierarchy shared across the package."""


class NoisyCREError(Exception):
    """Base class for all package errors."""


class ConfigurationError(NoisyCREError):
    """Invalid sizes, rates, dimensions or other configuration values."""


class ValidationError(NoisyCREError):
    """Structurally valid input that violates a semantic constraint."""


class ParseError(NoisyCREError):
    """Malformed record in an ingested file; message names the line."""


class CapacityError(NoisyCREError):
    """A pool or buffer is too small for the requested operation."""


class IntegrityError(NoisyCREError):
    """Internal bookkeeping contract broken (duplicate insert, missing id)."""


class StateError(NoisyCREError):
    """Operation called out of order, e.g. backward without a forward."""


class NumericalError(NoisyCREError):
    """Non-finite values where finite ones are required."""


class StreamLookupError(NoisyCREError):
    """Example queried against a stream or task it does not belong to."""


class PhaseError(NoisyCREError):
    """Failure inside one pipeline phase; carries the phase tag."""

    def __init__(self, phase: str, message: str):
        super().__init__(f"[{phase}] {message}")
        self.phase = phase
