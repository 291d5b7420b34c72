"""Dataset CSV I/O and seeded synthetic generators.

CSV layout: a header ``feat_0, ..., feat_{m-1}, target`` followed by one row per
sample, UTF-8 with ``.`` as decimal separator.
"""
from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from ..models import Dataset
from .config import SyntheticSpec


def _header(m: int) -> list[str]:
    return [f"feat_{k}" for k in range(m)] + ["target"]


def count_rows(path) -> int:
    with open(path, encoding="utf-8", newline="") as fh:
        return max(sum(1 for row in csv.reader(fh) if row) - 1, 0)


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise ConfigError(f"cannot read dataset {path}: {exc.strerror or exc}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ConfigError(f"{path}: empty file, N >= 1 required")
        header = [h.strip() for h in header]
        m = len(header) - 1
        if m < 1 or header != _header(m):
            raise ConfigError(f"{path}: header must be feat_0..feat_{{m-1}},target, got {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != m + 1:
                raise ConfigError(f"{path}: row {lineno}: expected {m + 1} columns, got {len(row)}")
            try:
                vals = [float(v) for v in row]
            except ValueError:
                raise ConfigError(f"{path}: row {lineno}: non-numeric value") from None
            if not all(math.isfinite(v) for v in vals):
                raise ConfigError(f"{path}: row {lineno}: non-finite value")
            rows.append(vals)
    if not rows:
        raise ConfigError(f"{path}: no samples, N >= 1 required")
    arr = np.array(rows)
    return Dataset(arr[:, :m], arr[:, m])


def write_dataset(dataset: Dataset, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_header(dataset.n_features))
        for v, y in zip(dataset.features, dataset.targets):
            w.writerow([repr(float(a)) for a in v] + [repr(float(y))])
    return path


def generate_synthetic(spec: SyntheticSpec, rng: np.random.Generator | int) -> Dataset:
    """Draw a dataset from ``spec``.

    ``linear``        y = <w*, v> + noise, v ~ N(0, I)
    ``two-cluster``   v around +/- separation * 1, target = cluster label +/-1 (+ noise)
    ``signed-design`` v_i = s_i u with random signs s_i: every per-sample Hessian
                      coincides, so the diffusion matrix is constant in the weights
    ``replicated``    one sample repeated n times: zero diffusion matrix
    """
    rng = np.random.default_rng(rng)
    n, m = spec.n, spec.m
    w_star = rng.standard_normal(m)
    if spec.kind == "linear":
        V = rng.standard_normal((n, m))
        y = V @ w_star + spec.noise * rng.standard_normal(n)
    elif spec.kind == "two-cluster":
        labels = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
        V = labels[:, None] * spec.separation + rng.standard_normal((n, m))
        y = labels + spec.noise * rng.standard_normal(n)
    elif spec.kind == "signed-design":
        u = rng.standard_normal(m)
        s = rng.choice([-1.0, 1.0], size=n)
        V = s[:, None] * u
        y = V @ w_star + spec.noise * rng.standard_normal(n)
    elif spec.kind == "replicated":
        v = rng.standard_normal(m)
        V = np.tile(v, (n, 1))
        y = np.full(n, v @ w_star + spec.noise * rng.standard_normal())
    else:  # pragma: no cover - guarded by the schema
        raise ConfigError(f"unknown synthetic kind {spec.kind!r}")
    return Dataset(V, y)
