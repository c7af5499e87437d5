"""Exception types shared across the package."""


class XTransportError(Exception):
    """Base class for all package errors."""


class DomainError(XTransportError, ValueError):
    """A query point or interval lies outside the window of a measure or path."""


class PreconditionError(XTransportError, ValueError):
    """An operation was called on inputs violating its contract."""


class HorizonError(XTransportError):
    """The simulated horizon was too short to find the requested time."""


class EstimationError(XTransportError):
    """Not enough data to produce an estimate."""


class HarvestError(XTransportError):
    """An excursion pool could not be filled."""
