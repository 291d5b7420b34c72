"""GD, minibatch SGD, the RGD flow and the forced geodesic under one trajectory contract.

Discrete methods (``gd``, ``sgd``) use the explicit update ``x <- x - eta * grad``;
the continuous models (``gd-flow``, ``rgd``, ``geodesic``) are integrated with
fixed-step RK4 of step ``eta``.  Time is ``t = step * eta`` in every case.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Callable, Iterable

import numpy as np

from .diffusion import (
    EpsilonPolicy,
    INVERSE_MODES,
    diffusion_from_grads,
    max_eigenvalue,
    metric_at,
    numerical_rank,
)
from .errors import NumericalError
from .geometry import (
    CHRISTOFFEL_MODES,
    GeodesicState,
    discarded_term,
    geodesic_accel,
    j_residual_from,
    metric_gradient,
)
from .models import CONVENTIONS, LossModel, gradient_from_grads

METHODS = ("gd", "sgd", "gd-flow", "rgd", "geodesic")
STOCHASTIC = ("sgd",)
VELOCITY_POLICIES = ("metric-gradient", "zero", "custom")
SAMPLING = ("independent", "epoch")


@dataclass
class Record:
    step: int
    t: float
    x: np.ndarray
    v: np.ndarray | None
    loss: float
    grad_norm: float
    diag: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "step": self.step,
            "t": self.t,
            "x": self.x.tolist(),
            "v": None if self.v is None else self.v.tolist(),
            "loss": self.loss,
            "grad_norm": self.grad_norm,
            "diag": self.diag,
        }


@dataclass
class Trajectory:
    method: str
    cadence: int = 1
    total_steps: int = 0
    seed: int | None = None
    records: list[Record] = field(default_factory=list)

    @property
    def label(self) -> str:
        return self.method if self.seed is None else f"{self.method}-seed{self.seed}"

    @property
    def t(self) -> np.ndarray:
        return np.array([r.t for r in self.records])

    @property
    def xs(self) -> np.ndarray:
        return np.stack([r.x for r in self.records])

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    @property
    def final(self) -> Record:
        return self.records[-1]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_json()) + "\n" for r in self.records)


def record(trajectory: Trajectory, step: int, t: float, x, v, loss: float, grad_norm: float,
           diagnostics: dict | None = None) -> bool:
    """Append a record if ``step`` is on the cadence grid, is step 0, or is the final step."""
    if not (step % trajectory.cadence == 0 or step == trajectory.total_steps):
        return False
    if trajectory.records and t <= trajectory.records[-1].t:
        raise ValueError("trajectory times must increase strictly")
    trajectory.records.append(Record(step, float(t), np.array(x, dtype=float),
                                     None if v is None else np.array(v, dtype=float),
                                     float(loss), float(grad_norm), dict(diagnostics or {})))
    return True


@dataclass
class DynamicsConfig:
    method: str
    eta: float = 0.01
    steps: int = 100
    batch_size: int | None = None
    sampling: str = "independent"
    seed: int | None = None
    christoffel: str = "weak-field"
    inverse: str | None = None
    velocity: str = "metric-gradient"
    v0: list | None = None
    cadence: int = 1
    convention: str = "sum"
    epsilon: EpsilonPolicy = field(default_factory=EpsilonPolicy)
    diagnostics: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.cadence < 1:
            raise ValueError("cadence must be >= 1")
        if self.convention not in CONVENTIONS:
            raise ValueError(f"unknown convention {self.convention!r}")
        if self.sampling not in SAMPLING:
            raise ValueError(f"unknown sampling {self.sampling!r}")
        if self.christoffel not in CHRISTOFFEL_MODES:
            raise ValueError(f"unknown Christoffel mode {self.christoffel!r}")
        if self.inverse is None:
            self.inverse = "exact" if self.method == "geodesic" else "weak-field"
        if self.inverse not in INVERSE_MODES:
            raise ValueError(f"unknown inverse mode {self.inverse!r}")
        if self.velocity not in VELOCITY_POLICIES:
            raise ValueError(f"unknown velocity policy {self.velocity!r}")
        if self.velocity == "custom" and self.v0 is None:
            raise ValueError("custom velocity policy requires v0")

    def as_dict(self) -> dict:
        out = asdict(self)
        out["epsilon"] = asdict(self.epsilon)
        return out


# ---------------------------------------------------------------------------
# pointwise evaluation shared by all methods
# ---------------------------------------------------------------------------

@dataclass
class _Point:
    G: np.ndarray
    grad: np.ndarray
    D: np.ndarray
    lam: float
    eps: float


def _evaluate(model: LossModel, x, config: DynamicsConfig, policy: EpsilonPolicy) -> _Point:
    G = model.grads(x)
    if not np.all(np.isfinite(G)):
        raise NumericalError("non-finite per-sample gradients")
    D = diffusion_from_grads(G)
    lam = max_eigenvalue(D)
    return _Point(G, gradient_from_grads(G, config.convention), D, lam, policy.at(D, lam))


def _diagnostics(model, point: _Point, config: DynamicsConfig, extra: dict | None = None) -> dict:
    if not config.diagnostics:
        return dict(extra or {})
    diag = {
        "lambda_max": point.lam,
        "epsilon": point.eps,
        "rank": numerical_rank(point.D),
        "j_residual": j_residual_from(point.D, point.grad, point.eps, "weak-field"),
    }
    diag.update(extra or {})
    return diag


def _log(model, traj, config, policy, step, x, v=None, extra_fn: Callable | None = None):
    if not (step % traj.cadence == 0 or step == traj.total_steps):
        return
    p = _evaluate(model, x, config, policy)
    extra = extra_fn(p, x, v) if (extra_fn and config.diagnostics) else None
    record(traj, step, step * config.eta, x, v, model.loss(x, config.convention),
           float(np.linalg.norm(p.grad)), _diagnostics(model, p, config, extra))


def _start(model, x0, config) -> tuple[np.ndarray, EpsilonPolicy, Trajectory]:
    x = np.array(x0, dtype=float)
    if x.shape != (model.dim,):
        raise ValueError(f"x0 has shape {x.shape}, expected ({model.dim},)")
    policy = config.epsilon.freeze(diffusion_from_grads(model.grads(x)))
    seed = config.seed if config.method in STOCHASTIC else None
    return x, policy, Trajectory(config.method, config.cadence, config.steps, seed)


def _check_finite(x, method, step):
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"{method}: non-finite state at step {step}")


# ---------------------------------------------------------------------------
# discrete methods
# ---------------------------------------------------------------------------

def step_gd(model: LossModel, x, eta: float, convention: str = "sum") -> np.ndarray:
    grad = model.gradient(x, convention)
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite gradient")
    return np.asarray(x, dtype=float) - eta * grad


def run_gd(model: LossModel, x0, config: DynamicsConfig) -> Trajectory:
    x, policy, traj = _start(model, x0, config)
    _log(model, traj, config, policy, 0, x)
    for step in range(1, config.steps + 1):
        x = step_gd(model, x, config.eta, config.convention)
        _check_finite(x, "gd", step)
        _log(model, traj, config, policy, step, x)
    return traj


def minibatches(n: int, batch_size: int, rng: np.random.Generator, sampling: str = "independent") -> Iterable[np.ndarray]:
    """Infinite stream of index batches.

    ``independent``: each batch drawn without replacement, independently per step.
    ``epoch``: reshuffle once per pass and cut consecutive batches (a short tail
    is completed from the next pass).
    """
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch size {batch_size} must satisfy 1 <= |B| <= N = {n}")
    if sampling == "independent":
        while True:
            yield rng.choice(n, size=batch_size, replace=False)
    buf = np.empty(0, dtype=int)
    while True:
        while buf.size < batch_size:
            buf = np.concatenate([buf, rng.permutation(n)])
        yield buf[:batch_size]
        buf = buf[batch_size:]


def run_sgd(model: LossModel, x0, config: DynamicsConfig) -> Trajectory:
    batch = model.n_samples if config.batch_size is None else config.batch_size
    if batch > model.n_samples:
        raise ValueError(f"batch_size={batch} exceeds dataset size N={model.n_samples}")
    rng = np.random.default_rng(0 if config.seed is None else config.seed)
    x, policy, traj = _start(model, x0, config)
    stream = minibatches(model.n_samples, batch, rng, config.sampling)
    _log(model, traj, config, policy, 0, x)
    for step in range(1, config.steps + 1):
        x = x - config.eta * model.batch_gradient(x, next(stream), config.convention)
        _check_finite(x, "sgd", step)
        _log(model, traj, config, policy, step, x)
    return traj


# ---------------------------------------------------------------------------
# continuous models
# ---------------------------------------------------------------------------

def rk4_step(fun: Callable[[np.ndarray], np.ndarray], y: np.ndarray, h: float) -> np.ndarray:
    k1 = fun(y)
    k2 = fun(y + 0.5 * h * k1)
    k3 = fun(y + 0.5 * h * k2)
    k4 = fun(y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _metric(point: _Point, policy: EpsilonPolicy, method: str):
    try:
        return metric_at(point.D, point.eps, point.lam)
    except NumericalError as exc:
        hint = " (frozen epsilon)" if policy.frozen else ""
        raise NumericalError(f"{method}: {exc}{hint}") from exc


def rgd_velocity(model: LossModel, x, config: DynamicsConfig, policy: EpsilonPolicy, use_metric: bool = True):
    """Right-hand side ``-grad_D f(x)``; with ``use_metric=False`` the plain ``-grad f``."""
    p = _evaluate(model, x, config, policy)
    if not use_metric:
        return -p.grad
    return -metric_gradient(_metric(p, policy, config.method), p.grad, config.inverse)


def _run_flow(model, x0, config, use_metric: bool) -> Trajectory:
    x, policy, traj = _start(model, x0, config)
    field_ = lambda y: rgd_velocity(model, y, config, policy, use_metric)  # noqa: E731
    _log(model, traj, config, policy, 0, x)
    for step in range(1, config.steps + 1):
        x = rk4_step(field_, x, config.eta)
        _check_finite(x, config.method, step)
        _log(model, traj, config, policy, step, x)
    return traj


def run_gd_flow(model: LossModel, x0, config: DynamicsConfig) -> Trajectory:
    """RK4 integration of ``dx/dt = -grad f`` through the same code path as RGD."""
    return _run_flow(model, x0, config, use_metric=False)


def run_rgd_flow(model: LossModel, x0, config: DynamicsConfig) -> Trajectory:
    """RK4 integration of ``dx/dt = -(I - eps D) grad f`` (or ``-g^{-1} grad f`` in exact mode)."""
    return _run_flow(model, x0, config, use_metric=True)


def initial_velocity(model: LossModel, x0, config: DynamicsConfig, policy: EpsilonPolicy | None = None) -> np.ndarray:
    policy = config.epsilon.freeze(diffusion_from_grads(model.grads(x0))) if policy is None else policy
    if config.velocity == "zero":
        return np.zeros(model.dim)
    if config.velocity == "custom":
        v0 = np.asarray(config.v0, dtype=float)
        if v0.shape != (model.dim,):
            raise ValueError(f"v0 has shape {v0.shape}, expected ({model.dim},)")
        return v0
    return rgd_velocity(model, x0, config, policy)


def run_geodesic(model: LossModel, x0, config: DynamicsConfig) -> Trajectory:
    """RK4 on the first-order system ``(x, v)`` with ``dv/dt = geodesic_accel``."""
    x, policy, traj = _start(model, x0, config)
    d = model.dim
    v = initial_velocity(model, x, config, policy)

    def field_(y):
        xs, vs = y[:d], y[d:]
        p = _evaluate(model, xs, config, policy)
        metric = _metric(p, policy, "geodesic")
        acc = geodesic_accel(model, GeodesicState(xs, vs), p.eps, config.christoffel, config.inverse,
                             config.convention, metric)
        return np.concatenate([vs, acc])

    def extra(p, xs, vs):
        return {"discarded_term": float(np.max(np.abs(discarded_term(model, xs, vs, p.eps)), initial=0.0))}

    y = np.concatenate([x, v])
    _log(model, traj, config, policy, 0, x, v, extra)
    for step in range(1, config.steps + 1):
        y = rk4_step(field_, y, config.eta)
        _check_finite(y, "geodesic", step)
        _log(model, traj, config, policy, step, y[:d], y[d:], extra)
    return traj


RUNNERS = {
    "gd": run_gd,
    "sgd": run_sgd,
    "gd-flow": run_gd_flow,
    "rgd": run_rgd_flow,
    "geodesic": run_geodesic,
}


def run(model: LossModel, x0, config: DynamicsConfig) -> Trajectory:
    return RUNNERS[config.method](model, x0, config)


EQUIVALENCE_C = 1.0


def equivalence_tolerance(epsilon: float, lambda_max: float, n_samples: int, scale: float,
                          C: float = EQUIVALENCE_C) -> float:
    """Sup-norm bound ``C ((eps lam)^2 + eps lam / N^2) scale`` for geodesic vs RGD.

    ``eps lam`` makes the bound dimensionless; ``scale`` is the size of the
    reference trajectory, ``sup_t |x_rgd(t) - x0|``.  The quadratic term is the
    weak-field inverse error and the ``1/N^2`` term the pairwise normalisation.
    """
    q = float(epsilon) * float(lambda_max)
    return C * (q * q + q / n_samples**2) * float(scale)


def trajectory_scale(trajectory: Trajectory) -> float:
    xs = trajectory.xs
    return float(np.max(np.linalg.norm(xs - xs[0], axis=1)))
