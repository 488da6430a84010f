"""SVG figures: ensemble quantile bands and stability curves."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import quantile_bands  # noqa: E402


def band_plot(path, ensembles: dict, ylabel: str, q=(0.1, 0.9), title: str | None = None) -> Path:
    """One median line plus a shaded (q_lo, q_hi) band per named ``[members, frames]`` ensemble."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, values in ensembles.items():
        med, lo, hi = quantile_bands(values, q)
        t = np.arange(len(med))
        (line,) = ax.plot(t, med, label=name)
        ax.fill_between(t, lo, hi, color=line.get_color(), alpha=0.25, linewidth=0)
    ax.set_xlabel("frame")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def stability_plot(path, curves: dict, title: str | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, frac in curves.items():
        ax.step(np.arange(len(frac)), frac, where="post", label=name)
    ax.set_ylim(-0.02, 1.02)
    ax.set_xlabel("frame")
    ax.set_ylabel("fraction stable")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path
