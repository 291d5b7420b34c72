"""Per-sample loss models.

Every model represents a loss ``f = sum_i f_i`` over a fixed, ordered dataset and
exposes per-sample values, gradients and Hessians.  Weight vectors are flat
``float64`` arrays of length ``dim``.
"""
from __future__ import annotations

import abc
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericalError

CONVENTIONS = ("sum", "mean")


@dataclass(frozen=True)
class Dataset:
    """Ordered samples ``(feature vector, target)``; row ``i`` identifies ``f_i``."""

    features: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        features = np.array(self.features, dtype=float)
        targets = np.array(self.targets, dtype=float).reshape(-1)
        if features.ndim == 1:
            features = features.reshape(-1, 1)
        if features.ndim != 2 or features.shape[0] == 0:
            raise ConfigError("dataset must contain N >= 1 samples")
        if features.shape[0] != targets.shape[0]:
            raise ConfigError(
                f"features have {features.shape[0]} rows but targets have {targets.shape[0]}"
            )
        if not (np.all(np.isfinite(features)) and np.all(np.isfinite(targets))):
            raise ConfigError("dataset contains non-finite values")
        features.setflags(write=False)
        targets.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "targets", targets)

    @property
    def size(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


# ---------------------------------------------------------------------------
# finite-difference oracles
# ---------------------------------------------------------------------------

def _steps(x: np.ndarray, step) -> np.ndarray:
    h = np.broadcast_to(np.asarray(step, dtype=float), x.shape).copy()
    if np.any(h <= 0) or not np.all(np.isfinite(h)):
        raise ValueError("finite-difference step must be positive")
    return h


def central_gradient(fun: Callable[[np.ndarray], float], x, step) -> np.ndarray:
    """Central-difference gradient ``(f(x+h e_k) - f(x-h e_k)) / 2h``; ``step`` may be per-coordinate."""
    x = np.asarray(x, dtype=float)
    h = _steps(x, step)
    out = np.empty_like(x)
    for k in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[k] += h[k]
        xm[k] -= h[k]
        out[k] = (fun(xp) - fun(xm)) / (2.0 * h[k])
    return out


def central_jacobian(fun: Callable[[np.ndarray], np.ndarray], x, step, symmetrize=False) -> np.ndarray:
    """Central differences of a vector- or matrix-valued ``fun``; derivative axis is last.

    With ``symmetrize`` the (square) result is returned as ``(J + J^T) / 2``.
    """
    x = np.asarray(x, dtype=float)
    h = _steps(x, step)
    cols = []
    for k in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[k] += h[k]
        xm[k] -= h[k]
        cols.append((np.asarray(fun(xp)) - np.asarray(fun(xm))) / (2.0 * h[k]))
    jac = np.stack(cols, axis=-1)
    if symmetrize:
        jac = 0.5 * (jac + jac.T)
    return jac


# ---------------------------------------------------------------------------
# model base class
# ---------------------------------------------------------------------------

class LossModel(abc.ABC):
    """A sum of per-sample losses with analytic first (and usually second) derivatives.

    Subclasses implement ``_value``, ``_grad`` and ``_hessian`` for a single
    validated sample; the vectorised accessors can be overridden for speed.
    """

    architecture: str = "abstract"

    def __init__(self, n_samples: int, dim: int):
        if n_samples < 1:
            raise ConfigError("N >= 1 required")
        if dim < 1:
            raise ConfigError("d >= 1 required")
        self.n_samples = int(n_samples)
        self.dim = int(dim)

    # -- checks -----------------------------------------------------------
    def _check_x(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"weight vector has shape {x.shape}, expected ({self.dim},)")
        return x

    def _check_i(self, i) -> int:
        if not 0 <= int(i) < self.n_samples:
            raise IndexError(f"sample index {i} out of range [0, {self.n_samples})")
        return int(i)

    # -- per-sample interface ----------------------------------------------
    @abc.abstractmethod
    def _value(self, i: int, x: np.ndarray) -> float: ...

    @abc.abstractmethod
    def _grad(self, i: int, x: np.ndarray) -> np.ndarray: ...

    def _hessian(self, i: int, x: np.ndarray) -> np.ndarray:
        return fd_hessian_oracle(self, i, x, hessian_steps(x))

    def per_sample_value(self, i, x) -> float:
        return float(self._value(self._check_i(i), self._check_x(x)))

    def per_sample_grad(self, i, x) -> np.ndarray:
        return np.asarray(self._grad(self._check_i(i), self._check_x(x)), dtype=float)

    def per_sample_hessian(self, i, x) -> np.ndarray:
        return np.asarray(self._hessian(self._check_i(i), self._check_x(x)), dtype=float)

    # -- vectorised accessors ------------------------------------------------
    def values(self, x) -> np.ndarray:
        x = self._check_x(x)
        return np.array([self._value(i, x) for i in range(self.n_samples)], dtype=float)

    def grads(self, x) -> np.ndarray:
        """Per-sample Jacobian, shape ``(N, d)``; row ``i`` is the gradient of ``f_i``."""
        return self.grads_at(x, np.arange(self.n_samples))

    def grads_at(self, x, indices) -> np.ndarray:
        """Gradient rows for ``indices``.

        Overrides must compute each row independently of which other rows are
        requested, so a minibatch sees bit-identical rows to the full Jacobian.
        """
        x = self._check_x(x)
        return np.stack([self._grad(int(i), x) for i in indices])

    def hessians(self, x) -> np.ndarray:
        x = self._check_x(x)
        return np.stack([self._hessian(i, x) for i in range(self.n_samples)])

    # -- totals ------------------------------------------------------------
    def loss(self, x, convention: str = "sum") -> float:
        vals = self.values(x)
        total = float(np.sum(vals))
        return total if _check_convention(convention) == "sum" else total / self.n_samples

    def gradient(self, x, convention: str = "sum") -> np.ndarray:
        return gradient_from_grads(self.grads(x), convention, self.n_samples)

    def batch_gradient(self, x, indices, convention: str = "sum") -> np.ndarray:
        """Minibatch gradient estimate, rescaled to the loss convention.

        Under ``sum`` the batch mean is multiplied by ``N`` so the full batch
        reproduces the full gradient.
        """
        x = self._check_x(x)
        _check_convention(convention)
        idx = np.sort(np.asarray(indices, dtype=int))
        if idx.size == 0:
            raise ValueError("empty minibatch")
        if idx.size == self.n_samples:
            return self.gradient(x, convention)
        rows = self.grads_at(x, np.concatenate([[0], idx]))
        return _shifted_mean(rows[1:], rows[0]) * (self.n_samples if convention == "sum" else 1.0)

    def hessian(self, x, convention: str = "sum") -> np.ndarray:
        total = np.sum(self.hessians(x), axis=0)
        return total if _check_convention(convention) == "sum" else total / self.n_samples

    def describe(self) -> dict:
        return {"architecture": self.architecture, "N": self.n_samples, "d": self.dim}


def _check_convention(convention: str) -> str:
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown loss convention {convention!r}; expected one of {CONVENTIONS}")
    return convention


def _shifted_mean(rows: np.ndarray, ref: np.ndarray) -> np.ndarray:
    # Accumulate deviations from a reference row: exact when all rows coincide.
    with np.errstate(invalid="ignore"):  # non-finite rows are reported by the caller
        return ref + np.sum(rows - ref, axis=0) / rows.shape[0]


def gradient_from_grads(G: np.ndarray, convention: str = "sum", n: int | None = None) -> np.ndarray:
    """Total gradient from the per-sample Jacobian, index-ordered reduction."""
    _check_convention(convention)
    mean = _shifted_mean(G, G[0])
    if not np.all(np.isfinite(mean)):
        raise NumericalError("non-finite gradient")
    return mean * (G.shape[0] if n is None else n) if convention == "sum" else mean


def hessian_steps(x) -> np.ndarray:
    """Per-coordinate step ``1e-4 * max(1, |x_k|)`` used for finite-difference Hessians."""
    return 1e-4 * np.maximum(1.0, np.abs(np.asarray(x, dtype=float)))


def fd_grad_oracle(model: LossModel, i, x, step) -> np.ndarray:
    """Central-difference gradient of ``f_i`` built from values only."""
    i = model._check_i(i)
    return central_gradient(lambda z: model._value(i, z), model._check_x(x), step)


def fd_hessian_oracle(model: LossModel, i, x, step) -> np.ndarray:
    """Central differences of the analytic gradient of ``f_i``, symmetrised."""
    i = model._check_i(i)
    return central_jacobian(lambda z: model._grad(i, z), model._check_x(x), step, symmetrize=True)


# ---------------------------------------------------------------------------
# concrete models
# ---------------------------------------------------------------------------

class QuadraticModel(LossModel):
    """``f_i(x) = (x - c_i)^T A_i (x - c_i) + b_i^T x + k_i``.

    ``curvature`` may be a scalar, a length-``d`` diagonal, a ``(d, d)`` matrix shared
    by all samples, or per-sample ``(N, d)`` diagonals / ``(N, d, d)`` matrices
    (a square 2-D array is always read as the shared matrix).
    When all samples share the curvature the diffusion matrix is constant in x.
    """

    architecture = "quadratic"

    def __init__(self, centers, curvature=1.0, linear=None, offsets=None):
        centers = np.array(centers, dtype=float)
        if centers.ndim == 1:
            centers = centers.reshape(-1, 1)
        n, d = centers.shape
        super().__init__(n, d)
        self.centers = centers
        self.curvature = _expand_curvature(curvature, n, d)
        # gradient operator A + A^T, exactly symmetric
        self._S = self.curvature + np.swapaxes(self.curvature, 1, 2)
        self.linear = np.zeros((n, d)) if linear is None else np.array(linear, dtype=float).reshape(n, d)
        self.offsets = np.zeros(n) if offsets is None else np.array(offsets, dtype=float).reshape(n)

    @classmethod
    def from_dataset(cls, dataset: Dataset, curvature=1.0) -> "QuadraticModel":
        """Centres from the feature rows, targets as additive offsets."""
        return cls(dataset.features, curvature=curvature, offsets=dataset.targets)

    def _value(self, i, x):
        r = x - self.centers[i]
        return r @ self.curvature[i] @ r + self.linear[i] @ x + self.offsets[i]

    def _grad(self, i, x):
        return self.grads_at(x, [i])[0]

    def _hessian(self, i, x):
        return self._S[i].copy()

    def grads_at(self, x, indices):
        x = self._check_x(x)
        idx = np.asarray(indices, dtype=int)
        # row-wise reductions: each row is independent of the batch composition
        return np.sum(self._S[idx] * (x - self.centers[idx])[:, None, :], axis=2) + self.linear[idx]

    def hessians(self, x):
        self._check_x(x)
        return self._S.copy()


def _expand_curvature(curvature, n: int, d: int) -> np.ndarray:
    a = np.array(curvature, dtype=float)
    if a.ndim == 0:
        return np.broadcast_to(a * np.eye(d), (n, d, d)).copy()
    if a.shape == (d,):
        return np.broadcast_to(np.diag(a), (n, d, d)).copy()
    if a.shape == (d, d):
        return np.broadcast_to(a, (n, d, d)).copy()
    if a.shape == (n, d):
        return np.stack([np.diag(row) for row in a])
    if a.shape == (n, d, d):
        return a.copy()
    raise ConfigError(f"curvature of shape {a.shape} incompatible with N={n}, d={d}")


class LinearRegressionModel(LossModel):
    """Squared residual ``f_i(w) = (<w, v_i> - y_i)^2``; weights have the feature dimension."""

    architecture = "linear-regression"

    def __init__(self, dataset: Dataset):
        super().__init__(dataset.size, dataset.n_features)
        self.dataset = dataset
        self._V = dataset.features
        self._y = dataset.targets

    def _value(self, i, x):
        r = self._V[i] @ x - self._y[i]
        return r * r

    def _grad(self, i, x):
        return self.grads_at(x, [i])[0]

    def _hessian(self, i, x):
        return 2.0 * np.outer(self._V[i], self._V[i])

    def values(self, x):
        r = self._V @ self._check_x(x) - self._y
        return r * r

    def grads_at(self, x, indices):
        idx = np.asarray(indices, dtype=int)
        V = self._V[idx]
        r = np.sum(V * self._check_x(x), axis=1) - self._y[idx]
        return 2.0 * r[:, None] * V

    def hessians(self, x):
        self._check_x(x)
        return 2.0 * np.einsum("ni,nj->nij", self._V, self._V)


ACTIVATIONS = {
    "tanh": (np.tanh, lambda a: 1.0 - np.tanh(a) ** 2),
    "identity": (lambda a: a, np.ones_like),
}


class TwoLayerModel(LossModel):
    """Scalar-output network ``y_hat = W2 . act(W1 v)`` with squared per-sample loss.

    Weights are flattened as ``[W1 (hidden x m, row-major), W2 (hidden)]`` so
    ``d = hidden * m + hidden``.  Hessians use central differences of the analytic
    gradient.
    """

    architecture = "two-layer"

    def __init__(self, dataset: Dataset, hidden: int = 4, activation: str = "tanh"):
        if hidden < 1:
            raise ConfigError("hidden width must be >= 1")
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}; expected one of {sorted(ACTIVATIONS)}")
        m = dataset.n_features
        super().__init__(dataset.size, hidden * m + hidden)
        self.dataset = dataset
        self.hidden = int(hidden)
        self.activation = activation
        self._act, self._dact = ACTIVATIONS[activation]

    def unflatten(self, x):
        h, m = self.hidden, self.dataset.n_features
        return x[: h * m].reshape(h, m), x[h * m:]

    def _forward(self, i, x):
        W1, W2 = self.unflatten(x)
        v = self.dataset.features[i]
        a = W1 @ v
        s = self._act(a)
        return v, a, s, W2, W2 @ s - self.dataset.targets[i]

    def _value(self, i, x):
        r = self._forward(i, x)[-1]
        return r * r

    def _grad(self, i, x):
        v, a, s, W2, r = self._forward(i, x)
        dW1 = np.outer(2.0 * r * W2 * self._dact(a), v)
        dW2 = 2.0 * r * s
        return np.concatenate([dW1.ravel(), dW2])

    def describe(self):
        return {**super().describe(), "hidden": self.hidden, "activation": self.activation}


class CallableModel(LossModel):
    """Model assembled from per-sample callables, for crafted experiments.

    ``grads`` defaults to central differences of ``values`` (step 1e-6) and
    ``hessians`` to central differences of the gradients.
    """

    architecture = "callable"

    def __init__(self, values: Sequence[Callable], dim: int, grads: Sequence[Callable] | None = None,
                 hessians: Sequence[Callable] | None = None):
        super().__init__(len(values), dim)
        self._values = list(values)
        self._grads = None if grads is None else list(grads)
        self._hessians = None if hessians is None else list(hessians)

    def _value(self, i, x):
        return float(self._values[i](x))

    def _grad(self, i, x):
        if self._grads is None:
            return central_gradient(self._values[i], x, 1e-6)
        return np.asarray(self._grads[i](x), dtype=float).reshape(self.dim)

    def _hessian(self, i, x):
        if self._hessians is None:
            return super()._hessian(i, x)
        return np.asarray(self._hessians[i](x), dtype=float).reshape(self.dim, self.dim)
