"""Report figures written next to the CSV outputs (Agg backend, no display needed)."""
from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import class_palette  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_class_proportions(stats: dict[str, np.ndarray], class_names: Sequence[str], path) -> Path:
    """Grouped bars: one group per class, one bar per split."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 + 0.9 * len(class_names), 3.0))
        splits = list(stats)
        width = 0.8 / max(len(splits), 1)
        x = np.arange(len(class_names))
        for i, split in enumerate(splits):
            ax.bar(x + (i - (len(splits) - 1) / 2) * width, 100 * np.asarray(stats[split]), width, label=split)
        ax.set_xticks(x, class_names, rotation=20)
        ax.set_ylabel("pixels (%)")
        ax.set_title("Class proportion")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_comparison(rows, path, small_class: str = "car") -> Path:
    """Seed-mean small-class F1 and mIoU per preprocessor, individual seeds as dots."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(8.0, 3.0))
        names = [r.kind for r in rows]
        x = np.arange(len(rows))
        panels = ((f"{small_class} F1", lambda r: r.small_f1, lambda r: r.mean_small_f1),
                  ("mIoU", lambda r: r.miou, lambda r: r.mean_miou))
        for ax, (label, per_seed, mean) in zip(axes, panels):
            ax.bar(x, [mean(r) for r in rows], color="#7a9cc6")
            for xi, r in zip(x, rows):
                vals = [0.0 if math.isnan(v) else v for v in per_seed(r)]
                ax.scatter(np.full(len(vals), xi), vals, s=10, color="k", zorder=3)
                if any(math.isnan(v) for v in per_seed(r)):
                    ax.annotate("NaN", (xi, 0.02), ha="center", fontsize=7)
            ax.set_xticks(x, names, rotation=20)
            ax.set_ylim(0, 1)
            ax.set_ylabel(label)
        fig.suptitle("Preprocessor comparison (seed mean)")
        return _save(fig, path)


def plot_loss_curve(losses: Sequence[float], path, window: int = 20) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        steps = np.arange(1, len(losses) + 1)
        ax.plot(steps, losses, lw=0.8, alpha=0.5, label="per step")
        if len(losses) >= window:
            smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
            ax.plot(steps[window - 1:], smooth, lw=1.5, label=f"mean of {window}")
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("joint loss")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_mask_preview(pred: np.ndarray, truth: np.ndarray | None, class_names: Sequence[str], path) -> Path:
    palette = class_palette(class_names)
    panels = [("prediction", pred)] + ([("ground truth", truth)] if truth is not None else [])
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=(3.0 * len(panels), 3.0), squeeze=False)
        for ax, (title, mask) in zip(axes[0], panels):
            ax.imshow(palette[np.asarray(mask)], interpolation="nearest")
            ax.set_title(title)
            ax.axis("off")
        return _save(fig, path)
