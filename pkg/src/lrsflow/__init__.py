"""Normalizing flows built on monotone linear rational splines."""

__version__ = "0.1.0"

from . import autodiff, spline  # noqa: E402
from .checkpoint import Checkpoint  # noqa: E402
from .errors import (  # noqa: E402
    CheckpointError, ConfigError, DataError, InvalidKnots, LRSFlowError, NonFiniteLoss,
    NotScalar, ShapeMismatch)
from .flow import FlowModel, build_model, make_rng  # noqa: E402
from .spline import (  # noqa: E402
    KnotSpec, SplineSettings, derive_bin_params, forward, inverse, inverse_gradient,
    make_spline, spline_gradient, squash_raw_params)
from .train import TrainConfig, fit  # noqa: E402

__all__ = [
    "Checkpoint", "CheckpointError", "ConfigError", "DataError", "FlowModel", "InvalidKnots",
    "KnotSpec", "LRSFlowError", "NonFiniteLoss", "NotScalar", "ShapeMismatch", "SplineSettings",
    "TrainConfig", "autodiff", "build_model", "derive_bin_params", "fit", "forward", "inverse",
    "inverse_gradient", "make_rng", "make_spline", "spline", "spline_gradient",
    "squash_raw_params",
]
