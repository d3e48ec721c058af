"""Exception types shared across the model, training and metric code."""


class ConfigurationError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class UndefinedMetricError(ValueError):
    """A metric has no defined value for the given inputs."""
