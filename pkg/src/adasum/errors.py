"""Exception hierarchy shared by every subpackage."""


class AdasumError(Exception):
    """Base class for all library errors."""


class ShapeError(AdasumError, ValueError):
    """Operands have incompatible lengths or a layout does not cover a vector."""


class ConfigError(AdasumError, ValueError):
    """Invalid configuration (world size, node size, model limits, flags)."""


class UndefinedMetricError(AdasumError, ValueError):
    """The orthogonality metric is undefined because every gradient is zero."""


class DegenerateDistributionError(AdasumError, ValueError):
    """A finite distribution has a zero mean or a zero-norm atom."""


class NumericError(AdasumError, ArithmeticError):
    """Non-finite loss, gradient or update where a finite one is required."""


class ProtocolError(AdasumError, RuntimeError):
    """Collective message tags disagree between sender and receiver."""


class TransportError(AdasumError, RuntimeError):
    """A peer is unreachable, timed out, or the network was aborted."""


class ConsistencyError(AdasumError, RuntimeError):
    """Ranks entered a collective step with diverging parameters."""
