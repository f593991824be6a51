"""Learning-curve plots (optional SVG artifacts).

`plot_learning_curves` draws one line per variant: the success rate averaged over
seeds and smoothed with a trailing moving average, with a band of one standard
error across seeds.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from gchrl_shaping import MetricsTable


def moving_average(curve: np.ndarray, window: int) -> np.ndarray:
    """Trailing mean; the first `window - 1` points average over what is available."""
    if window <= 1 or curve.size == 0:
        return curve.astype(np.float64)
    csum = np.cumsum(np.insert(curve.astype(np.float64), 0, 0.0))
    out = np.empty(curve.size)
    for i in range(curve.size):
        lo = max(0, i + 1 - window)
        out[i] = (csum[i + 1] - csum[lo]) / (i + 1 - lo)
    return out


def seed_curves(tables: Sequence[MetricsTable], window: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard error over seeds of the smoothed success curves."""
    length = min(len(t) for t in tables)
    curves = np.stack([moving_average(t.success_curve()[:length], window) for t in tables])
    mean = curves.mean(axis=0)
    stderr = curves.std(axis=0, ddof=1) / np.sqrt(len(tables)) if len(tables) > 1 else np.zeros(length)
    return mean, stderr


def plot_learning_curves(
    results: Mapping[str, Sequence[MetricsTable]],
    output: Path,
    *,
    title: str = "Success rate",
    window: int = 20,
) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4), layout="constrained")
    for label in sorted(results):
        tables = results[label]
        if not tables:
            continue
        mean, stderr = seed_curves(tables, window)
        x = np.arange(1, mean.size + 1)
        ax.plot(x, mean, label=label, linewidth=1.5)
        ax.fill_between(x, mean - stderr, mean + stderr, alpha=0.2)
    ax.set_xlabel("Episode")
    ax.set_ylabel(f"Success rate (moving average, {window} episodes)")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower right")

    output.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(output, format=output.suffix.lstrip(".") or "svg")
    plt.close(fig)
    return output
