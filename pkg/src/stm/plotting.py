"""Figures for training logs, evaluation reports and the ablation grid (matplotlib, Agg backend)."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def loss_curve(metrics_csv, path, smooth: int = 50) -> Path:
    """Total and per-term training loss from a metrics CSV (running mean over ``smooth`` steps)."""
    with open(metrics_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    it = np.array([int(r["iteration"]) for r in rows])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key in ("total", "rgb", "ssim", "lbs", "depth"):
        vals = np.array([float(r[key]) for r in rows])
        if not vals.any():
            continue
        k = max(1, min(smooth, len(vals)))
        run = np.convolve(vals, np.ones(k) / k, mode="valid")
        ax.plot(it[k - 1:], run, label=key, lw=1)
    ax.set_xlabel("iteration")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def frame_scores(report, path) -> Path:
    """Per-frame PSNR (full, crop, band) as grouped bars."""
    frames = report.frames
    x = np.arange(len(frames))
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(frames) + 2), 3.5))
    for i, (key, label) in enumerate((("psnr", "full"), ("psnr_crop", "crop"), ("psnr_band", "band"))):
        ax.bar(x + (i - 1) * 0.27, [getattr(f, key) for f in frames], 0.27, label=label)
    ax.set_xticks(x, [str(f.frame) for f in frames])
    ax.set_xlabel("held-out frame")
    ax.set_ylabel("PSNR (dB)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def comparison_strip(pairs, path, titles=("rendered", "target", "|error| x4")) -> Path:
    """Rows of (rendered, target) images with an amplified error column."""
    n = len(pairs)
    fig, axes = plt.subplots(n, 3, figsize=(6, 2 * n), squeeze=False)
    for row, (rendered, target) in enumerate(pairs):
        err = np.clip(4 * np.abs(rendered - target), 0, 1)
        for col, img in enumerate((rendered, target, err)):
            ax = axes[row, col]
            ax.imshow(np.clip(img, 0, 1), interpolation="nearest")
            ax.set_axis_off()
            if row == 0:
                ax.set_title(titles[col], fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def ablation_bars(result, path, metric: str = "psnr_band") -> Path:
    """Mean and per-seed values of one metric per grid row."""
    rows = result.rows()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    means = [result.mean(r, metric) for r in rows]
    ax.bar(range(len(rows)), means, color="#8aa9c9")
    for i, r in enumerate(rows):
        vals = [run.metrics[metric] for run in result.runs if run.row == r]
        ax.scatter([i] * len(vals), vals, color="k", s=10, zorder=3)
    ax.set_xticks(range(len(rows)), [f"({r})" for r in rows])
    lo = min(min(run.metrics[metric] for run in result.runs) - 1.0, min(means) - 1.0)
    ax.set_ylim(bottom=lo)
    ax.set_ylabel(metric)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
