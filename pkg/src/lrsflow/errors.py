"""Exception types raised across the package."""


class LRSFlowError(Exception):
    """Base class for all package errors."""


class InvalidKnots(LRSFlowError, ValueError):
    """Knot data violates the monotone spline preconditions."""


class ShapeMismatch(LRSFlowError, ValueError):
    pass


class NotScalar(LRSFlowError, ValueError):
    pass


class NonFiniteLoss(LRSFlowError, FloatingPointError):
    def __init__(self, iteration, value=float("nan")):
        super().__init__(f"non-finite loss {value!r} at iteration {iteration}")
        self.iteration = iteration
        self.value = value


class DataError(LRSFlowError, ValueError):
    pass


class ConfigError(LRSFlowError, ValueError):
    pass


class CheckpointError(LRSFlowError, ValueError):
    pass
