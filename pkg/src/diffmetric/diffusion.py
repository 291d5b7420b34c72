"""Diffusion matrix of per-sample gradients, epsilon selection and the diffusion metric.

``D(x)`` is the covariance of the per-sample gradients over the full dataset.  It
is built either from the variance formula or from the Jacobian of the pairwise
loss differences ``f_i - f_j`` (``i < j``); both agree to round-off.  The diffusion
metric is ``g = I + eps * D`` with ``eps < 1 / lambda_max(D)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import ConfigError, NumericalError
from .models import LossModel

VARIANCE_FORM = "variance-form"
PAIRWISE_FORM = "pairwise-form"
INVERSE_MODES = ("weak-field", "exact")

#: Maximum dataset size accepted by the O(N^2 d) pairwise construction.
PAIRWISE_MAX_SAMPLES = 512


@dataclass(frozen=True)
class PairwiseDifferenceJacobian:
    """Rows ``grad f_i - grad f_j`` for pairs ``(0,1), (0,2), ..., (N-2,N-1)``."""

    J: np.ndarray
    n_samples: int
    pairs: tuple = field(repr=False)


@dataclass(frozen=True)
class DiffusionMatrix:
    D: np.ndarray
    provenance: str
    x: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.D.shape[0]


def _matrix(D) -> np.ndarray:
    return D.D if isinstance(D, DiffusionMatrix) else np.asarray(D, dtype=float)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def pairwise_jacobian_from_grads(G: np.ndarray, max_samples: int = PAIRWISE_MAX_SAMPLES) -> PairwiseDifferenceJacobian:
    G = np.asarray(G, dtype=float)
    n = G.shape[0]
    if n < 2:
        raise ValueError("pairwise differences need N >= 2 (D is the zero matrix for N = 1)")
    if n > max_samples:
        raise ConfigError(f"pairwise form limited to N <= {max_samples}, got N={n}")
    pairs = tuple(combinations(range(n), 2))
    a, b = np.array(pairs).T
    return PairwiseDifferenceJacobian(G[a] - G[b], n, pairs)


def build_pairwise_jacobian(model: LossModel, x, max_samples: int = PAIRWISE_MAX_SAMPLES) -> PairwiseDifferenceJacobian:
    """Jacobian of the stacked pairwise loss differences at ``x``, shape ``(N(N-1)/2, d)``."""
    return pairwise_jacobian_from_grads(model.grads(x), max_samples)


def diffusion_from_grads(G: np.ndarray) -> np.ndarray:
    """Covariance ``(1/N) sum g g^T - gbar gbar^T`` of the rows of ``G``.

    Rows are shifted by the first row before accumulating (the covariance is
    shift invariant); this makes ``D`` exactly zero when all rows coincide.
    """
    G = np.asarray(G, dtype=float)
    n = G.shape[0]
    delta = G - G[0]
    mean = np.sum(delta, axis=0) / n
    D = delta.T @ delta / n - np.outer(mean, mean)
    D = 0.5 * (D + D.T)
    if not np.all(np.isfinite(D)):
        raise NumericalError("non-finite diffusion matrix")
    return D


def diffusion_variance_form(model: LossModel, x) -> DiffusionMatrix:
    x = np.asarray(x, dtype=float)
    return DiffusionMatrix(diffusion_from_grads(model.grads(x)), VARIANCE_FORM, x.copy())


def diffusion_pairwise_form(J: PairwiseDifferenceJacobian, n_samples: int | None = None,
                            x=None) -> DiffusionMatrix:
    """``D_rs = (1/N^2) sum_alpha J[alpha, r] J[alpha, s]``."""
    n = J.n_samples if n_samples is None else int(n_samples)
    if n != J.n_samples or J.J.shape[0] != n * (n - 1) // 2:
        raise ValueError(f"pairwise Jacobian with {J.J.shape[0]} rows does not match N={n}")
    D = J.J.T @ J.J / n**2
    return DiffusionMatrix(0.5 * (D + D.T), PAIRWISE_FORM, None if x is None else np.asarray(x, float))


# ---------------------------------------------------------------------------
# spectrum
# ---------------------------------------------------------------------------

def _power_iteration(A: np.ndarray, tol: float, max_iter: int) -> tuple[float, bool]:
    # seeded start vector: a fixed vector like ones() can be orthogonal to the top eigenvector
    v = np.random.default_rng(0).standard_normal(A.shape[0])
    v /= np.linalg.norm(v)
    lam = v @ A @ v
    for _ in range(max_iter):
        w = A @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, True
        v = w / norm
        new = v @ A @ v
        if abs(new - lam) <= tol * max(abs(new), np.finfo(float).tiny):
            return float(new), True
        lam = new
    return float(lam), False


def max_eigenvalue(D, tol: float = 1e-12, max_iter: int = 20000) -> float:
    """Largest eigenvalue of a symmetric matrix by power iteration.

    Power iteration finds the eigenvalue of largest magnitude; when that one is
    negative the matrix is shifted by it and the iteration repeated.  If the
    iteration stalls (nearly degenerate top pair) the dense symmetric
    eigensolver is used instead.
    """
    A = _matrix(D)
    if not np.all(np.isfinite(A)):
        raise NumericalError("non-finite entries in matrix")
    if A.size == 0 or not np.any(A):
        return 0.0
    lam, ok = _power_iteration(A, tol, max_iter)
    if ok and lam < 0:
        shift = -lam
        lam, ok = _power_iteration(A + shift * np.eye(A.shape[0]), tol, max_iter)
        lam -= shift
    if not ok:
        lam = float(np.linalg.eigvalsh(A)[-1])
    return lam


def numerical_rank(D, rtol: float = 1e-8) -> int:
    """Number of singular values above ``rtol * lambda_max``."""
    A = _matrix(D)
    s = np.linalg.svd(A, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


# ---------------------------------------------------------------------------
# epsilon and the metric
# ---------------------------------------------------------------------------

def select_epsilon(D, c: float = 0.1, floor: float = 1e-3, lambda_max: float | None = None) -> float:
    """``eps = c / lambda_max``, or ``floor`` when ``D`` vanishes."""
    if not 0.0 < c < 1.0:
        raise ValueError(f"safety factor c must lie in (0, 1), got {c}")
    lam = max_eigenvalue(D) if lambda_max is None else lambda_max
    return c / lam if lam > 0 else float(floor)


@dataclass
class EpsilonPolicy:
    """How ``eps`` is chosen along a run: per evaluation point, or frozen at ``x0``."""

    c: float = 0.1
    floor: float = 1e-3
    frozen: bool = False
    frozen_value: float | None = None

    def __post_init__(self):
        if not 0.0 < self.c < 1.0:
            raise ValueError(f"safety factor c must lie in (0, 1), got {self.c}")
        if self.floor <= 0:
            raise ValueError("epsilon floor must be positive")

    def at(self, D, lambda_max: float | None = None) -> float:
        if self.frozen:
            if self.frozen_value is None:
                raise ValueError("frozen epsilon policy has not been initialised; call freeze()")
            return self.frozen_value
        return select_epsilon(D, self.c, self.floor, lambda_max)

    def freeze(self, D) -> "EpsilonPolicy":
        """Copy of a frozen policy with ``eps`` evaluated at ``D`` (the matrix at ``x0``)."""
        if not self.frozen:
            return self
        return EpsilonPolicy(self.c, self.floor, True, select_epsilon(D, self.c, self.floor))


@dataclass(frozen=True)
class DiffusionMetric:
    epsilon: float
    D: np.ndarray
    lambda_max: float

    @property
    def dim(self) -> int:
        return self.D.shape[0]

    @property
    def g(self) -> np.ndarray:
        return np.eye(self.dim) + self.epsilon * self.D

    def inverse(self, mode: str = "weak-field") -> np.ndarray:
        return metric_inverse(self, mode)


def metric_at(D, epsilon: float, lambda_max: float | None = None) -> DiffusionMetric:
    """``g = I + eps D``; raises when ``eps >= 1 / lambda_max``."""
    A = _matrix(D)
    if epsilon <= 0 or not np.isfinite(epsilon):
        raise ValueError(f"epsilon must be positive and finite, got {epsilon}")
    lam = max_eigenvalue(A) if lambda_max is None else float(lambda_max)
    # power iteration can land an ulp below lambda_max; treat the boundary as reached
    if lam > 0 and epsilon * lam >= 1.0 - 1e-12:
        raise NumericalError(
            f"epsilon={epsilon:.6g} violates eps < 1/lambda_max = {1.0 / lam:.6g}"
        )
    return DiffusionMetric(float(epsilon), A, lam)


def metric_inverse(metric: DiffusionMetric, mode: str = "weak-field") -> np.ndarray:
    """``I - eps D`` (weak-field) or the exact inverse of ``g`` (LU with partial pivoting)."""
    if mode not in INVERSE_MODES:
        raise ValueError(f"unknown inverse mode {mode!r}; expected one of {INVERSE_MODES}")
    eye = np.eye(metric.dim)
    if mode == "weak-field":
        return eye - metric.epsilon * metric.D
    try:
        return np.linalg.solve(metric.g, eye)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("singular diffusion metric") from exc


def weak_field_inverse_bound(metric: DiffusionMetric) -> float:
    """Neumann-series bound ``q^2 / (1 - q)`` with ``q = eps * lambda_max``."""
    q = metric.epsilon * metric.lambda_max
    return q * q / (1.0 - q)
