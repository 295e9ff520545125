"""pathflow: continuous normalizing flows with total-derivative and
path-gradient estimators for reverse-KL variational inference."""

__version__ = "0.1.0"

from .dynamics import DynamicsConfig
from .odeint import TimeGrid
from .cnf import (
    FlowTarget,
    adjoint_backward,
    forward_aug,
    inverse,
    log_density,
    path_gradient,
    sample_forward,
    score_gradient,
    total_gradient,
)
from .targets import (
    GaussianMixtureTarget,
    IsotropicGaussianTarget,
    Phi4Lattice,
    TargetDensity,
)
from .trainer import TrainConfig, compare_estimators, train

__all__ = [
    "__version__",
    "DynamicsConfig",
    "TimeGrid",
    "FlowTarget",
    "adjoint_backward",
    "forward_aug",
    "inverse",
    "log_density",
    "path_gradient",
    "sample_forward",
    "score_gradient",
    "total_gradient",
    "GaussianMixtureTarget",
    "IsotropicGaussianTarget",
    "Phi4Lattice",
    "TargetDensity",
    "TrainConfig",
    "compare_estimators",
    "train",
]
