import numpy as np
import pytest

from diffmetric.harness.config import SyntheticSpec
from diffmetric.harness.data import generate_synthetic
from diffmetric.models import Dataset, LinearRegressionModel, QuadraticModel, TwoLayerModel


def make_two_layer(seed=7, n=6, m=2, hidden=3, activation="tanh"):
    rng = np.random.default_rng(seed)
    ds = Dataset(rng.standard_normal((n, m)), rng.standard_normal(n))
    model = TwoLayerModel(ds, hidden=hidden, activation=activation)
    return model, 0.8 * rng.standard_normal(model.dim)


def make_linreg(seed=3, n=6, m=3):
    rng = np.random.default_rng(seed)
    ds = Dataset(rng.standard_normal((n, m)), rng.standard_normal(n))
    return LinearRegressionModel(ds), rng.standard_normal(m)


def make_signed_linreg(seed=5, n=6, m=3):
    """Linear regression with features +/- u: constant D, vanishing Christoffel symbols."""
    ds = generate_synthetic(SyntheticSpec(kind="signed-design", n=n, m=m, noise=0.5), seed)
    return LinearRegressionModel(ds), np.random.default_rng(seed + 100).standard_normal(m)


def make_shared_quadratic(seed=1, n=5, d=4):
    """Quadratic losses with a common anisotropic curvature: constant, full-rank-ish D."""
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((d, d))
    A = A @ A.T / d + 0.5 * np.eye(d)
    return QuadraticModel(rng.standard_normal((n, d)), curvature=A), rng.standard_normal(d)


def make_varying_quadratic(seed=2, n=4, d=3):
    rng = np.random.default_rng(seed)
    curv = rng.uniform(0.2, 2.0, size=(n, d))
    return QuadraticModel(rng.standard_normal((n, d)), curvature=curv), rng.standard_normal(d)


def make_replicated(seed=4, n=4, m=2):
    ds = generate_synthetic(SyntheticSpec(kind="replicated", n=n, m=m), seed)
    return LinearRegressionModel(ds), np.random.default_rng(seed).standard_normal(m)


@pytest.fixture
def two_layer():
    return make_two_layer()


@pytest.fixture
def linreg():
    return make_linreg()


@pytest.fixture
def signed_linreg():
    return make_signed_linreg()


@pytest.fixture
def shared_quadratic():
    return make_shared_quadratic()


@pytest.fixture
def replicated():
    return make_replicated()
