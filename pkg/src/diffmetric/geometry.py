"""Christoffel symbols of the diffusion metric, metric gradients and geodesic forces.

Index convention: ``Gamma[k, i, j]`` is the coefficient of ``e_k`` in
``nabla_{e_i} e_j``; it is symmetric in ``(i, j)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import (
    DiffusionMetric,
    diffusion_from_grads,
    max_eigenvalue,
    metric_at,
    metric_inverse,
)
from .models import LossModel, gradient_from_grads

WEAK_FIELD = "weak-field"
EXACT_FD = "exact-fd"
CHRISTOFFEL_MODES = (WEAK_FIELD, EXACT_FD)


@dataclass(frozen=True)
class ChristoffelField:
    gamma: np.ndarray
    mode: str

    def contract(self, v) -> np.ndarray:
        """``Gamma^k_ij v^i v^j``."""
        return np.einsum("kij,i,j->k", self.gamma, v, v)

    def symmetry_error(self) -> float:
        return float(np.max(np.abs(self.gamma - np.swapaxes(self.gamma, 1, 2)), initial=0.0))


@dataclass
class GeodesicState:
    x: np.ndarray
    v: np.ndarray
    t: float = 0.0


def default_steps(x) -> np.ndarray:
    """``1e-4 * (1 + |x_k|)`` per coordinate."""
    return 1e-4 * (1.0 + np.abs(np.asarray(x, dtype=float)))


def _shifted(G, H):
    # deviations from sample 0; covariance-type sums below are shift invariant
    return G - G[0], H - H[0]


# ---------------------------------------------------------------------------
# Christoffel symbols
# ---------------------------------------------------------------------------

def christoffel_weak_field(model: LossModel, x, epsilon: float) -> ChristoffelField:
    """``Gamma^k_ij = (eps/N^2) sum_alpha (d_i d_j fhat_alpha)(d_k fhat_alpha)``.

    The sum over pairs ``alpha = (a, b)`` of products of differences equals
    ``N sum_n H_n g_n - (sum H)(sum g)``, which is evaluated in O(N d^3).
    """
    n = model.n_samples
    if n < 2:
        raise ValueError("Christoffel symbols of the diffusion metric need N >= 2")
    dG, dH = _shifted(model.grads(x), model.hessians(x))
    cross = n * np.einsum("nij,nk->kij", dH, dG) - np.einsum("ij,k->kij", dH.sum(0), dG.sum(0))
    gamma = epsilon / n**2 * cross
    gamma = 0.5 * (gamma + np.swapaxes(gamma, 1, 2))
    return ChristoffelField(gamma, WEAK_FIELD)


def metric_derivatives(model: LossModel, x, epsilon: float, step) -> np.ndarray:
    """``dg[u] = d g / d x_u`` by central differences of ``g = I + eps D``."""
    x = np.asarray(x, dtype=float)
    h = np.broadcast_to(np.asarray(step, dtype=float), x.shape)
    if np.any(h <= 0):
        raise ValueError("finite-difference step must be positive")
    d = x.size
    dg = np.empty((d, d, d))
    for u in range(d):
        xp = x.copy()
        xm = x.copy()
        xp[u] += h[u]
        xm[u] -= h[u]
        gp = metric_at(diffusion_from_grads(model.grads(xp)), epsilon).g
        gm = metric_at(diffusion_from_grads(model.grads(xm)), epsilon).g
        dg[u] = (gp - gm) / (2.0 * h[u])
    return dg


def christoffel_levi_civita_fd(model: LossModel, x, epsilon: float, step=1e-4) -> ChristoffelField:
    """Levi-Civita symbols ``1/2 g^{wz} (d_u g_vz - d_z g_uv + d_v g_uz)`` with the exact inverse.

    Independent of the closed weak-field form: derivatives of ``g`` come from
    finite differences of ``D`` and indices are raised with the true ``g^{-1}``.
    """
    x = np.asarray(x, dtype=float)
    dg = metric_derivatives(model, x, epsilon, step)
    ginv = metric_inverse(metric_at(diffusion_from_grads(model.grads(x)), epsilon), "exact")
    # lowered symbols Gamma_{z,uv}
    lowered = 0.5 * (np.einsum("uvz->zuv", dg) + np.einsum("vuz->zuv", dg) - dg)
    gamma = np.einsum("wz,zuv->wuv", ginv, lowered)
    return ChristoffelField(gamma, EXACT_FD)


def christoffel(model: LossModel, x, epsilon: float, mode: str = WEAK_FIELD, step=None) -> ChristoffelField:
    if mode == WEAK_FIELD:
        return christoffel_weak_field(model, x, epsilon)
    if mode == EXACT_FD:
        return christoffel_levi_civita_fd(model, x, epsilon, default_steps(x) if step is None else step)
    raise ValueError(f"unknown Christoffel mode {mode!r}; expected one of {CHRISTOFFEL_MODES}")


def christoffel_gap(model: LossModel, x, epsilon: float, step=None) -> float:
    """Max absolute difference between the weak-field and the exact finite-difference symbols."""
    wf = christoffel_weak_field(model, x, epsilon).gamma
    ex = christoffel(model, x, epsilon, EXACT_FD, step).gamma
    return float(np.max(np.abs(wf - ex)))


GAP_BOUND_C = 2.0


def christoffel_gap_bound(model: LossModel, x, epsilon: float, step=None, C: float = GAP_BOUND_C) -> float:
    """``C kappa (eps^2 + h^2)`` with ``kappa = lambda_max max|Gamma_wf| / eps``.

    The weak-field symbols are ``O(eps)`` and their leading correction is
    ``O(eps lambda_max)`` relative to them; ``kappa`` carries the units.  ``C = 2``
    gives factor-two headroom over the measured gaps on the test fixtures.
    """
    x = np.asarray(x, dtype=float)
    D = diffusion_from_grads(model.grads(x))
    lam = max_eigenvalue(D)
    wf = christoffel_weak_field(model, x, epsilon).gamma
    kappa = lam * float(np.max(np.abs(wf), initial=0.0)) / epsilon
    h = float(np.max(default_steps(x) if step is None else np.asarray(step, dtype=float)))
    return C * kappa * (epsilon**2 + h**2)


# ---------------------------------------------------------------------------
# gradients and forces
# ---------------------------------------------------------------------------

def metric_gradient(metric: DiffusionMetric, grad_f, mode: str = "weak-field") -> np.ndarray:
    """Raise the Euclidean gradient with the (weak-field or exact) inverse metric."""
    grad_f = np.asarray(grad_f, dtype=float)
    if grad_f.shape != (metric.dim,):
        raise ValueError(f"gradient of shape {grad_f.shape} does not match metric dimension {metric.dim}")
    if not np.any(metric.D):
        return grad_f.copy()
    return metric_inverse(metric, mode) @ grad_f


def weak_field_contraction(dG: np.ndarray, dH: np.ndarray, v, epsilon: float) -> np.ndarray:
    """``Gamma(v, v)`` for the weak-field symbols without materialising the tensor."""
    n = dG.shape[0]
    q = np.einsum("nij,i,j->n", dH, v, v)
    return epsilon / n**2 * (n * q @ dG - q.sum() * dG.sum(0))


def geodesic_accel(model: LossModel, state: GeodesicState, epsilon: float, christoffel_mode: str = WEAK_FIELD,
                   inverse_mode: str = "exact", convention: str = "sum", metric: DiffusionMetric | None = None,
                   ) -> np.ndarray:
    """Acceleration ``-Gamma(v, v) - g^{-1} Hess f v`` of the forced geodesic.

    The force is the covector ``-d/dt grad f = -Hess f v`` raised with the inverse
    metric, so that for constant ``D`` the system integrates once to
    ``g dx/dt = -grad f + const``.  With ``D = 0`` this is time-differentiated GD.
    """
    x = np.asarray(state.x, dtype=float)
    v = np.asarray(state.v, dtype=float)
    G = model.grads(x)
    Hs = model.hessians(x)
    if metric is None:
        metric = metric_at(diffusion_from_grads(G), epsilon)
    hess_total = Hs.sum(0) if convention == "sum" else Hs.sum(0) / model.n_samples
    force = -metric_gradient(metric, hess_total @ v, inverse_mode)
    if model.n_samples < 2 or not np.any(v):
        return force
    if christoffel_mode == WEAK_FIELD:
        dG, dH = _shifted(G, Hs)
        return force - weak_field_contraction(dG, dH, v, epsilon)
    return force - christoffel(model, x, epsilon, christoffel_mode).contract(v)


def discarded_term(model: LossModel, x, v, epsilon: float) -> np.ndarray:
    """``(eps/N^2) sum_alpha fhat_alpha d/dt d_k fhat_alpha`` along velocity ``v``.

    This is the term dropped when the once-integrated geodesic system is reduced
    to the RGD flow; evaluated as ``eps * cov_n(f_n, H_n v)``.
    """
    n = model.n_samples
    f = model.values(x)
    Hv = np.einsum("nij,j->ni", model.hessians(x), np.asarray(v, dtype=float))
    df, dHv = f - f[0], Hv - Hv[0]
    return epsilon / n**2 * (n * df @ dHv - df.sum() * dHv.sum(0))


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def third_derivative_residual(model: LossModel, x, step=None, max_triples: int = 64, max_pairs: int = 32,
                              seed: int = 0) -> float:
    """Max ``|d_i d_j d_k fhat_alpha|`` from central differences of per-sample Hessians.

    Exhaustive when ``d^3 <= max_triples`` and ``N(N-1)/2 <= max_pairs``; otherwise a
    seeded uniform subsample of triples and pairs.
    """
    x = np.asarray(x, dtype=float)
    n, d = model.n_samples, model.dim
    if n < 2:
        return 0.0
    h = default_steps(x) if step is None else np.broadcast_to(np.asarray(step, float), x.shape)
    rng = np.random.default_rng(seed)
    n_triples = d**3
    if n_triples <= max_triples:
        flat = np.arange(n_triples)
    else:
        flat = rng.choice(n_triples, size=max_triples, replace=False)
    triples = np.array(np.unravel_index(flat, (d, d, d))).T
    n_pairs = n * (n - 1) // 2
    pair_idx = np.arange(n_pairs) if n_pairs <= max_pairs else np.sort(rng.choice(n_pairs, max_pairs, replace=False))
    a, b = np.triu_indices(n, k=1)
    a, b = a[pair_idx], b[pair_idx]
    worst = 0.0
    for k in np.unique(triples[:, 2]):
        xp = x.copy()
        xm = x.copy()
        xp[k] += h[k]
        xm[k] -= h[k]
        dH = (model.hessians(xp) - model.hessians(xm)) / (2.0 * h[k])
        dfhat = dH[a] - dH[b]
        sel = triples[triples[:, 2] == k]
        worst = max(worst, float(np.max(np.abs(dfhat[:, sel[:, 0], sel[:, 1]]))))
    return worst


def divergence_Dtilde(model: LossModel, x, epsilon: float, step=None) -> np.ndarray:
    """``(div Dtilde)_r = eps sum_s d_s D_rs`` for ``Dtilde = I + eps D``."""
    x = np.asarray(x, dtype=float)
    h = default_steps(x) if step is None else np.broadcast_to(np.asarray(step, float), x.shape)
    if np.any(h <= 0):
        raise ValueError("finite-difference step must be positive")
    div = np.zeros(x.size)
    for s in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[s] += h[s]
        xm[s] -= h[s]
        dD = (diffusion_from_grads(model.grads(xp)) - diffusion_from_grads(model.grads(xm))) / (2.0 * h[s])
        div += dD[:, s]
    return epsilon * div


def j_residual_from(D: np.ndarray, grad_f, epsilon: float, mode: str = "weak-field") -> float:
    """``|| -grad f + (I + eps D) grad_D f ||_inf``; equals ``||eps^2 D^2 grad f||`` in weak-field mode."""
    metric = metric_at(D, epsilon)
    grad_f = np.asarray(grad_f, dtype=float)
    return float(np.max(np.abs(-grad_f + metric.g @ metric_gradient(metric, grad_f, mode)), initial=0.0))


def j_residual(model: LossModel, x, epsilon: float, mode: str = "weak-field", convention: str = "sum") -> float:
    G = model.grads(x)
    return j_residual_from(diffusion_from_grads(G), gradient_from_grads(G, convention), epsilon, mode)
