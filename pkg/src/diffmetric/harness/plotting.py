"""Matplotlib figures rendered next to the plot-data CSVs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# stripped so reruns produce identical files
_METADATA = {"Software": None}


def _figure(width=6.0, height=3.8):
    fig, ax = plt.subplots(figsize=(width, height), dpi=100)
    ax.grid(True, alpha=0.3, linewidth=0.6)
    for side in ("top", "right"):
        ax.spines[side].set_visible(False)
    return fig, ax


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, metadata=_METADATA)
    plt.close(fig)
    return path


def plot_losses(trajectories: dict, path) -> Path:
    """Loss against time, one line per method (SGD shown as the mean over seeds)."""
    fig, ax = _figure()
    for name, tr in trajectories.items():
        ax.plot(tr.t, tr.losses, label=name, linewidth=1.4)
    if trajectories and all(min(tr.losses) > 0 for tr in trajectories.values()):
        ax.set_yscale("log")
    ax.set_xlabel("t")
    ax.set_ylabel("loss f(x)")
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def plot_distances(distances: dict, path) -> Path:
    fig, ax = _figure()
    for (a, b), (t, dist) in distances.items():
        ax.plot(t, dist, label=f"{a} vs {b}", linewidth=1.2)
    ax.set_xlabel("t")
    ax.set_ylabel("|x_a(t) - x_b(t)|")
    if distances:
        ax.legend(frameon=False, fontsize=8)
    else:
        ax.text(0.5, 0.5, "single method: no pairs", ha="center", va="center", transform=ax.transAxes)
    return _save(fig, path)
