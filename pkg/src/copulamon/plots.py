"""Static SVG plots for monitor reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .cvi import predict_power  # noqa: E402

# fixed salt and no date so reruns write identical files
plt.rcParams["svg.hashsalt"] = "copulamon"
_META = {"Date": None, "Creator": None}


def _save(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)


def plot_statistic(t, values, h, path: Path, label: str = "Lambda") -> None:
    fig, ax = plt.subplots(figsize=(7, 3.5))
    vals = np.asarray(values, dtype=float)
    finite = np.where(np.isfinite(vals), vals, np.nan)
    ax.plot(t, finite, marker=".", lw=1)
    if h is not None:
        ax.axhline(h, color="red", ls="--", lw=1, label=f"h = {h:.4g}")
        ax.legend(loc="upper left")
    ax.set_xlabel("segment")
    ax.set_ylabel(label)
    fig.tight_layout()
    _save(fig, path)


def plot_curves(states, spec, path: Path, labels=None) -> None:
    grid = np.linspace(spec.boundary[0], spec.boundary[1], 251)
    fig, ax = plt.subplots(figsize=(7, 4))
    for k, state in enumerate(states):
        mean, sd = predict_power(state, grid, spec, include_noise=False)
        name = labels[k] if labels else f"t = {state.t}"
        ax.plot(grid, mean, lw=1.2, label=name)
        ax.fill_between(grid, mean - 2 * sd, mean + 2 * sd, alpha=0.15)
    ax.set_xlabel("wind speed (m/s)")
    ax.set_ylabel("normalised power")
    ax.legend(loc="lower right", fontsize="small")
    fig.tight_layout()
    _save(fig, path)
