"""Experiment orchestration: model construction, multi-method runs, comparison and outputs."""
from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from ..diffusion import EpsilonPolicy, diffusion_from_grads, max_eigenvalue, numerical_rank, select_epsilon
from ..dynamics import STOCHASTIC, DynamicsConfig, Record, Trajectory, run
from ..errors import ConfigError, DiffmetricError, NumericalError
from ..geometry import christoffel_gap, divergence_Dtilde, j_residual_from, third_derivative_residual
from ..models import Dataset, LinearRegressionModel, LossModel, QuadraticModel, TwoLayerModel, gradient_from_grads
from .config import ExperimentConfig
from .data import generate_synthetic, load_dataset

log = logging.getLogger(__name__)

TIMING_KEY = "timing"

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


# ---------------------------------------------------------------------------
# setup
# ---------------------------------------------------------------------------

def _streams(cfg: ExperimentConfig):
    data_ss, init_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    return np.random.default_rng(data_ss), np.random.default_rng(init_ss)


def resolve_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.model.synthetic is not None:
        return generate_synthetic(cfg.model.synthetic, _streams(cfg)[0])
    return load_dataset(cfg.dataset_path())


def build_model(cfg: ExperimentConfig, dataset: Dataset) -> LossModel:
    spec = cfg.model
    if spec.architecture == "quadratic":
        curvature = 1.0 if spec.curvature is None else spec.curvature
        if spec.curvature is not None and len(spec.curvature) != dataset.n_features:
            raise ConfigError(f"model.curvature: expected {dataset.n_features} entries, got {len(spec.curvature)}")
        return QuadraticModel.from_dataset(dataset, curvature)
    if spec.architecture == "linear-regression":
        return LinearRegressionModel(dataset)
    return TwoLayerModel(dataset, spec.hidden, spec.activation)


def initial_point(cfg: ExperimentConfig, model: LossModel) -> np.ndarray:
    if cfg.init.x0 is not None:
        x0 = np.array(cfg.init.x0, dtype=float)
        if x0.shape != (model.dim,):
            raise ConfigError(f"init.x0: expected {model.dim} entries, got {x0.size}")
        return x0
    return cfg.init.scale * _streams(cfg)[1].standard_normal(model.dim)


def epsilon_policy(cfg: ExperimentConfig) -> EpsilonPolicy:
    return EpsilonPolicy(c=cfg.epsilon.c, floor=cfg.epsilon.floor, frozen=cfg.epsilon.frozen)


def dynamics_configs(cfg: ExperimentConfig) -> list[DynamicsConfig]:
    """One entry per (method, seed) run, in configured order; deterministic methods run once."""
    out = []
    for spec in cfg.dynamics:
        seeds = cfg.seeds if spec.method in STOCHASTIC else [None]
        for s in seeds:
            out.append(DynamicsConfig(
                method=spec.method, eta=spec.eta, steps=spec.steps, batch_size=spec.batch_size,
                sampling=spec.sampling, seed=s, christoffel=spec.christoffel, inverse=spec.inverse,
                velocity=spec.velocity, v0=spec.v0, cadence=cfg.cadence, convention=cfg.convention,
                epsilon=epsilon_policy(cfg), diagnostics=cfg.diagnostics.enabled,
            ))
    return out


def worker_count() -> int:
    raw = os.environ.get("DIFFMETRIC_THREADS")
    if raw is None:
        return min(4, os.cpu_count() or 1)
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DIFFMETRIC_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"DIFFMETRIC_THREADS must be a positive integer, got {raw!r}")
    return n


# ---------------------------------------------------------------------------
# comparison
# ---------------------------------------------------------------------------

def mean_trajectory(trajs: list[Trajectory]) -> Trajectory:
    """Pointwise mean over runs sharing a time grid (e.g. SGD over seeds)."""
    if len(trajs) == 1:
        return trajs[0]
    base = trajs[0]
    for tr in trajs[1:]:
        if not np.array_equal(tr.t, base.t):
            raise ValueError("cannot average trajectories on different time grids")
    out = Trajectory(base.method, base.cadence, base.total_steps, None)
    for k, rec in enumerate(base.records):
        out.records.append(Record(
            rec.step, rec.t, np.mean([tr.records[k].x for tr in trajs], axis=0), None,
            float(np.mean([tr.records[k].loss for tr in trajs])),
            float(np.mean([tr.records[k].grad_norm for tr in trajs])),
        ))
    return out


def pathwise_distance(a: Trajectory, b: Trajectory) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Euclidean distance ``|x_a(t) - x_b(t)|`` on a common grid, plus both losses there.

    Identical grids are used as-is; otherwise both trajectories are linearly
    interpolated onto the coarser grid restricted to the overlapping time range.
    """
    ta, tb = a.t, b.t
    if ta.size == tb.size and np.array_equal(ta, tb):
        return ta, np.linalg.norm(a.xs - b.xs, axis=1), np.abs(a.losses - b.losses)
    lo, hi = max(ta[0], tb[0]), min(ta[-1], tb[-1])
    if lo > hi:
        raise ValueError(f"trajectories have disjoint time ranges [{ta[0]}, {ta[-1]}] and [{tb[0]}, {tb[-1]}]")
    ga = ta[(ta >= lo) & (ta <= hi)]
    gb = tb[(tb >= lo) & (tb <= hi)]
    grid = ga if ga.size <= gb.size else gb
    if grid.size == 0:
        grid = np.array([lo])

    def interp(tr):
        xs = tr.xs
        return (np.stack([np.interp(grid, tr.t, xs[:, k]) for k in range(xs.shape[1])], axis=1),
                np.interp(grid, tr.t, tr.losses))

    xa, la = interp(a)
    xb, lb = interp(b)
    return grid, np.linalg.norm(xa - xb, axis=1), np.abs(la - lb)


def compare_trajectories(a: Trajectory, b: Trajectory) -> dict:
    """Sup and time-averaged L2 pathwise distance, and the terminal loss gap."""
    t, dist, loss_gap = pathwise_distance(a, b)
    span = t[-1] - t[0]
    l2 = float(np.sqrt(_trapezoid(dist**2, t) / span)) if span > 0 else float(dist[0])
    return {"sup": float(np.max(dist)), "l2": l2, "terminal_loss_gap": float(loss_gap[-1])}


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    report: dict
    trajectories: list[Trajectory]
    representatives: dict[str, Trajectory]
    dataset: Dataset | None = None
    figures: bool = True
    distances: dict = field(default_factory=dict)


def point_diagnostics(model: LossModel, x, cfg: ExperimentConfig) -> tuple[dict, np.ndarray]:
    """Geometry diagnostics at a single point, and ``D`` there."""
    G = model.grads(x)
    D = diffusion_from_grads(G)
    lam = max_eigenvalue(D)
    eps = select_epsilon(D, cfg.epsilon.c, cfg.epsilon.floor, lam)
    grad = gradient_from_grads(G, cfg.convention)
    out = {
        "lambda_max": lam,
        "epsilon": eps,
        "rank": numerical_rank(D),
        "rank_bound": model.n_samples - 1,
        "j_residual": j_residual_from(D, grad, eps, "weak-field"),
        "div_Dtilde_maxnorm": float(np.max(np.abs(divergence_Dtilde(model, x, eps)))),
        "third_derivative_residual": third_derivative_residual(model, x),
        "christoffel_gap": None,
    }
    if model.n_samples >= 2:
        out["christoffel_gap"] = christoffel_gap(model, x, eps, cfg.diagnostics.christoffel_step)
    return out, D


def _run_one(model, x0, dcfg: DynamicsConfig) -> Trajectory:
    label = dcfg.method if dcfg.seed is None else f"{dcfg.method} (seed {dcfg.seed})"
    try:
        return run(model, x0, dcfg)
    except DiffmetricError as exc:
        raise NumericalError(f"run {label} failed: {exc}") from exc
    except (ValueError, ArithmeticError, IndexError) as exc:
        raise NumericalError(f"run {label} failed: {exc}") from exc


def _stats(values) -> dict:
    arr = np.asarray(values, dtype=float)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "min": float(arr.min()), "max": float(arr.max())}


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    started = time.perf_counter()
    dataset = resolve_dataset(cfg)
    model = build_model(cfg, dataset)
    x0 = initial_point(cfg, model)
    jobs = dynamics_configs(cfg)
    log.info("running %d job(s) on %s with N=%d, d=%d", len(jobs), model.architecture, model.n_samples, model.dim)
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        trajectories = list(pool.map(lambda j: _run_one(model, x0, j), jobs))

    by_method: dict[str, list[Trajectory]] = {}
    for tr in trajectories:
        by_method.setdefault(tr.method, []).append(tr)
    reps = {m: mean_trajectory(trs) for m, trs in by_method.items()}

    methods = {
        m: {
            "runs": len(trs),
            "seeds": [tr.seed for tr in trs] if m in STOCHASTIC else None,
            "terminal_loss": _stats([tr.final.loss for tr in trs]),
            "final_t": trs[0].final.t,
        }
        for m, trs in by_method.items()
    }
    pairs, distances = [], {}
    for a, b in combinations(list(reps), 2):
        t, dist, _ = pathwise_distance(reps[a], reps[b])
        distances[(a, b)] = (t, dist)
        pairs.append({"a": a, "b": b, **compare_trajectories(reps[a], reps[b])})

    diag = {}
    if cfg.diagnostics.enabled:
        recs = [r.diag for tr in trajectories for r in tr.records]
        ranks = [d["rank"] for d in recs]
        bound = model.n_samples - 1
        if max(ranks) > bound:
            raise NumericalError(f"observed rank(D) = {max(ranks)} exceeds the bound N-1 = {bound}")
        diag = {
            "lambda_max": {"min": min(d["lambda_max"] for d in recs), "max": max(d["lambda_max"] for d in recs)},
            "epsilon": {"min": min(d["epsilon"] for d in recs), "max": max(d["epsilon"] for d in recs)},
            "rank_max": max(ranks),
            "rank_bound": bound,
            "j_residual_max": max(d["j_residual"] for d in recs),
        }
        at_x0, _ = point_diagnostics(model, x0, cfg)
        geo = [r.diag.get("discarded_term", 0.0) for tr in trajectories if tr.method == "geodesic" for r in tr.records]
        diag.update({
            "christoffel_gap": at_x0["christoffel_gap"],
            "third_derivative_residual": at_x0["third_derivative_residual"],
            "div_Dtilde_maxnorm": at_x0["div_Dtilde_maxnorm"],
            "j_residual": at_x0["j_residual"],
            "discarded_term_max": max(geo) if geo else None,
        })

    report = {
        "config": cfg.resolved(),
        "model": model.describe(),
        "x0": x0.tolist(),
        "methods": methods,
        "pairs": pairs,
        "diagnostics": diag,
        TIMING_KEY: {"wall_clock_s": time.perf_counter() - started},
    }
    return ExperimentResult(report, trajectories, reps,
                            dataset if cfg.model.synthetic is not None else None,
                            cfg.output.figures, distances)


# ---------------------------------------------------------------------------
# outputs
# ---------------------------------------------------------------------------

def output_plan(cfg: ExperimentConfig, out_dir) -> list[str]:
    out_dir = Path(out_dir)
    labels = []
    for d in dynamics_configs(cfg):
        labels.append(d.method if d.seed is None else f"{d.method}-seed{d.seed}")
    files = ["report.json"] + [f"runs/{lbl}.jsonl" for lbl in labels] + ["plots/loss.csv", "plots/distance.csv"]
    if cfg.output.figures:
        files += ["plots/loss.png", "plots/distance.png"]
    if cfg.model.synthetic is not None:
        files.append("dataset.csv")
    return [str(out_dir / f) for f in files]


def emit_outputs(result: ExperimentResult, out_dir) -> list[Path]:
    """Write ``report.json``, ``runs/*.jsonl``, ``plots/*.csv`` (and figures, dataset.csv)."""
    from .data import write_dataset

    out_dir = Path(out_dir)
    written = []
    try:
        (out_dir / "runs").mkdir(parents=True, exist_ok=True)
        (out_dir / "plots").mkdir(parents=True, exist_ok=True)
        p = out_dir / "report.json"
        p.write_text(json.dumps(result.report, indent=2) + "\n", encoding="utf-8")
        written.append(p)
        for tr in result.trajectories:
            p = out_dir / "runs" / f"{tr.label}.jsonl"
            p.write_text(tr.to_jsonl(), encoding="utf-8")
            written.append(p)
        p = out_dir / "plots" / "loss.csv"
        with open(p, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "t", "loss"])
            for m, tr in result.representatives.items():
                for r in tr.records:
                    w.writerow([m, repr(r.t), repr(r.loss)])
        written.append(p)
        p = out_dir / "plots" / "distance.csv"
        with open(p, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["pair", "t", "distance"])
            for (a, b), (t, dist) in result.distances.items():
                for ti, di in zip(t, dist):
                    w.writerow([f"{a}|{b}", repr(float(ti)), repr(float(di))])
        written.append(p)
        if result.figures:
            from .plotting import plot_distances, plot_losses

            written.append(plot_losses(result.representatives, out_dir / "plots" / "loss.png"))
            written.append(plot_distances(result.distances, out_dir / "plots" / "distance.png"))
        if result.dataset is not None:
            written.append(write_dataset(result.dataset, out_dir / "dataset.csv"))
    except OSError as exc:
        raise DiffmetricError(f"cannot write outputs under {out_dir}: {exc}") from exc
    return written
