"""Shared exception types."""


class CentermixError(Exception):
    """Base class for all package errors."""


class DimensionError(CentermixError):
    """Shapes or axes do not satisfy an operation's contract."""


class ContractError(CentermixError):
    """A documented precondition was violated."""


class NumericsError(CentermixError):
    """A non-finite value was produced while checked mode is active."""


class ValidationError(CentermixError):
    """A clinical record or serialized object failed validation."""


class RoutingError(CentermixError):
    """A center flag does not name a registered router."""


class ConfigError(CentermixError):
    """Invalid configuration value or combination."""


class DegenerateGateError(CentermixError):
    """Softmax input had no finite entry along the reduction axis."""
