"""Exception hierarchy shared across the package."""


class FedPeftError(Exception):
    """Base class for every error raised by fedpeft."""


class DimensionError(FedPeftError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(FedPeftError, RuntimeError):
    """A caller violated an API precondition."""


class NonFiniteError(FedPeftError, FloatingPointError):
    """A tensor picked up NaN or Inf values."""


class RankError(FedPeftError, ValueError):
    """Requested decomposition rank is out of range."""


class NumericalError(FedPeftError, ArithmeticError):
    """An iterative numerical routine failed to converge."""

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class ConfigError(FedPeftError, ValueError):
    """Invalid experiment, strategy or data configuration."""


class ProtocolError(FedPeftError, ValueError):
    """Payloads or updates do not match what the receiver expects."""


class AggregationError(FedPeftError, RuntimeError):
    """Server-side aggregation failed for a specific tensor."""


class TrainingError(FedPeftError, RuntimeError):
    """Local or centralized training diverged."""

    def __init__(self, message, round_index=None, client_id=None):
        super().__init__(message)
        self.round_index = round_index
        self.client_id = client_id


class MetricError(FedPeftError, ValueError):
    """A metric is undefined for the given inputs."""
