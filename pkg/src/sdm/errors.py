"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions are inconsistent with the declared model sizes."""


class DataError(ValueError):
    """Input data violates its contract (non-finite values, bad ranges, malformed rows)."""


class ParameterError(ValueError):
    """A scalar parameter is outside its valid domain."""


class NumericalError(ArithmeticError):
    """A linear-algebra step failed (singular or badly conditioned matrix)."""


class ConfigError(ValueError):
    """Experiment configuration is invalid; message lists the offending fields."""
