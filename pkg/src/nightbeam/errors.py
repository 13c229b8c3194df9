"""Exception types shared across the engine."""


class ShapeError(ValueError):
    """Operands have mismatched or invalid dimensions."""


class BudgetError(ValueError):
    """Energy budget outside the representable range."""


class ModelError(ValueError):
    """Invalid camera or headlight model parameters."""


class CalibrationError(RuntimeError):
    """Warp construction failed on degenerate geometry."""


class PolicyError(RuntimeError):
    """A policy violated its output contract."""


class NumericalError(ArithmeticError):
    """An optimization step produced non-finite values."""


class ConfigError(ValueError):
    """Missing or inconsistent configuration."""


class ScorerError(RuntimeError):
    """A scorer failed to produce a score."""


class TransportError(ScorerError):
    """The external scorer connection failed."""


class ProtocolError(ScorerError):
    """The external scorer sent a malformed or unexpected message."""


class VersionMismatchError(ProtocolError):
    """The external scorer speaks an incompatible protocol version."""


class ScorerTimeoutError(ScorerError):
    """The external scorer did not answer within the configured timeout."""
