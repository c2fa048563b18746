"""Matplotlib figures for ablation and training-dynamics reports.

SVG output is made byte-stable by fixing the id hash salt and dropping the
date metadata.
"""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .trainer import TrainMetrics  # noqa: E402

DYNAMICS_PANELS = (
    ("reward_accuracy", "reward accuracy"),
    ("entropy", "entropy (nats)"),
    ("mean_response_length", "mean response length (tokens)"),
    ("clip_fraction", "clip ratio"),
)

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "padgrpo",
    "svg.fonttype": "none",
}


def smooth(y: Sequence[float], window: int) -> np.ndarray:
    """Trailing moving average; the first points average what is available."""
    y = np.asarray(y, dtype=float)
    if window <= 1 or y.size == 0:
        return y
    c = np.cumsum(np.insert(y, 0, 0.0))
    out = np.empty_like(y)
    for i in range(y.size):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


def _default_window(n: int) -> int:
    return max(1, n // 50)


def save_svg(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_ablation(curves: Mapping[str, Sequence[Sequence[float]]], path: str | Path,
                  window: int | None = None, title: str = "Training reward accuracy by strategy") -> Path:
    """Overlay mean reward-accuracy curves (one band of +-1 std over seeds per strategy)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 3.8))
        for name, runs in curves.items():
            arr = np.asarray(runs, dtype=float)
            w = window or _default_window(arr.shape[1])
            sm = np.stack([smooth(r, w) for r in arr])
            mean, std = sm.mean(axis=0), sm.std(axis=0)
            x = np.arange(arr.shape[1])
            (line,) = ax.plot(x, mean, lw=1.4, label=name)
            ax.fill_between(x, mean - std, mean + std, color=line.get_color(), alpha=0.15, lw=0)
        ax.set_xlabel("step")
        ax.set_ylabel("reward accuracy")
        ax.set_ylim(-0.02, 1.02)
        ax.set_title(title)
        ax.legend(frameon=False, loc="upper left")
        return save_svg(fig, path)


def plot_dynamics(runs: Mapping[str, Sequence[TrainMetrics]], path: str | Path,
                  window: int | None = None) -> Path:
    """Four panels (accuracy, entropy, length, clip ratio) with one series per run."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, 2, figsize=(8.0, 5.6))
        for ax, (col, label), letter in zip(axes.flat, DYNAMICS_PANELS, "abcd"):
            for run_id, metrics in runs.items():
                y = [getattr(m, col) for m in metrics]
                w = window or _default_window(len(y))
                ax.plot(np.arange(len(y)), smooth(y, w), lw=1.2, label=run_id)
            ax.set_xlabel("step")
            ax.set_ylabel(label)
            ax.set_title(f"({letter})", loc="left")
        axes.flat[0].legend(frameon=False)
        fig.tight_layout()
        return save_svg(fig, path)
