"""Figure rendering for reports: sweep curves, training-loss curves, retrieval
summaries, and synthesis preview grids. All figures are written as PNG files
next to the delimited reports they illustrate.
"""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from .evaluation import EvalSummary, SweepReport


def plot_sweep(report: SweepReport, out_png: str | Path) -> Path:
    """Mean mAP and top-1 versus the swept value, with per-repetition dots."""
    out_png = Path(out_png)
    out_png.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    values = sorted({row.value for row in report.rows})
    for metric, color in (("mAP", "tab:blue"), ("top1", "tab:orange")):
        means = report.mean_by_value(metric)
        ax.plot(values, [means[v] for v in values], marker="o", color=color, label=metric)
        for row in report.rows:
            ax.plot(
                [row.value], [getattr(row.summary, metric)],
                marker=".", color=color, alpha=0.35, markersize=4,
            )
    ax.set_xlabel(report.axis)
    ax.set_ylabel("metric")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(f"{report.axis} sweep ({report.repetitions} repetitions)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def plot_training_log(
    csv_path: str | Path,
    out_png: str | Path,
    columns: Optional[Sequence[str]] = None,
) -> Path:
    """Loss components over steps from a training CSV log."""
    csv_path = Path(csv_path)
    out_png = Path(out_png)
    out_png.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path) as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"empty training log {csv_path}")
    steps = np.array([int(r["step"]) for r in rows])
    skip = {"step", "wall_time_s", "lr_app", "lr_gen"}
    names = [c for c in rows[0] if c not in skip] if columns is None else list(columns)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for name in names:
        series = np.array([float(r[name]) for r in rows])
        ax.plot(steps, series, label=name, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8, ncol=2)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def plot_eval_summary(summary: EvalSummary, out_png: str | Path) -> Path:
    """Per-query AP histogram beside the CMC bar chart."""
    out_png = Path(out_png)
    out_png.parent.mkdir(parents=True, exist_ok=True)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.5))
    ax1.hist(summary.aps, bins=np.linspace(0, 1, 21), color="tab:blue", edgecolor="black")
    ax1.set_xlabel("average precision")
    ax1.set_ylabel("queries")
    ax1.set_title(f"mAP = {summary.mAP:.3f} over {summary.n_queries} queries")
    ks = ["top1", "top5", "top10"]
    ax2.bar(ks, [summary.top1, summary.top5, summary.top10], color="tab:orange")
    ax2.set_ylim(0, 1.05)
    ax2.set_title("cumulative matching")
    for spine_ax in (ax1, ax2):
        spine_ax.grid(True, alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def save_image_grid(
    cells: list[list[Optional[np.ndarray]]],
    out_png: str | Path,
    pad: int = 2,
) -> Path:
    """Assemble equally sized float [0,1] HWC images into one padded grid PNG.

    None cells render as gray. All images must share one shape.
    """
    shapes = {c.shape for row in cells for c in row if c is not None}
    if len(shapes) != 1:
        raise ValueError(f"grid cells must share one shape, got {sorted(shapes)}")
    h, w, _ = next(iter(shapes))
    n_rows, n_cols = len(cells), len(cells[0])
    if any(len(row) != n_cols for row in cells):
        raise ValueError("ragged grid")
    canvas = np.full(
        (n_rows * h + pad * (n_rows + 1), n_cols * w + pad * (n_cols + 1), 3),
        0.5,
        dtype=np.float32,
    )
    for r, row in enumerate(cells):
        for c, cell in enumerate(row):
            if cell is None:
                continue
            y = pad + r * (h + pad)
            x = pad + c * (w + pad)
            canvas[y : y + h, x : x + w] = np.clip(cell, 0.0, 1.0)
    out_png = Path(out_png)
    out_png.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.rint(canvas * 255.0).astype(np.uint8)).save(out_png)
    return out_png
