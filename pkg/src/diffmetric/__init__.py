"""Diffusion-matrix geometry for SGD: diffusion metric, Christoffel symbols, RGD and geodesic dynamics."""
from .diffusion import (
    DiffusionMatrix,
    DiffusionMetric,
    EpsilonPolicy,
    build_pairwise_jacobian,
    diffusion_pairwise_form,
    diffusion_variance_form,
    max_eigenvalue,
    metric_at,
    metric_inverse,
    numerical_rank,
    select_epsilon,
)
from .dynamics import DynamicsConfig, Trajectory, run, run_geodesic, run_gd, run_gd_flow, run_rgd_flow, run_sgd
from .errors import ConfigError, DiffmetricError, NumericalError
from .geometry import (
    ChristoffelField,
    GeodesicState,
    christoffel_levi_civita_fd,
    christoffel_weak_field,
    divergence_Dtilde,
    geodesic_accel,
    j_residual,
    metric_gradient,
    third_derivative_residual,
)
from .models import CallableModel, Dataset, LinearRegressionModel, LossModel, QuadraticModel, TwoLayerModel

__version__ = "0.1.0"
