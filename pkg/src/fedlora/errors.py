"""Exception taxonomy shared across the engine."""


class ShapeError(ValueError):
    """Operands have incompatible dimensions."""


class NumericalError(ArithmeticError):
    """A numerical routine failed (non-convergence, non-finite values)."""


class ConfigError(ValueError):
    """An experiment configuration is invalid."""


class ProtocolError(RuntimeError):
    """A federation round violated the protocol contract."""
