"""Figure rendering for the CLI report paths.

Every report-producing subcommand drops PNG figures next to its delimited
output so a run can be eyeballed without loading anything into a notebook.
Headless backend; nothing here ever opens a window.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_training_curves(rows, path) -> Path:
    """Loss and validation Jaccard against epoch, twin axes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    epochs = [r[0] for r in rows]
    losses = [r[1] for r in rows]
    jis = [r[2] for r in rows]
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.plot(epochs, losses, color="tab:blue", label="train loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("masked CE per sample", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(epochs, jis, color="tab:orange", label="val Jaccard")
    ax2.set_ylabel("validation Jaccard", color="tab:orange")
    ax2.set_ylim(0.0, 1.0)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_slice_dice(slice_dice, path) -> Path:
    """Per-depth-slice Dice profile; gaps where a slice is empty in both."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    z = np.arange(len(slice_dice))
    vals = np.array([np.nan if d is None else d for d in slice_dice], dtype=float)
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.plot(z, vals, marker=".", lw=1)
    ax.set_xlabel("z slice")
    ax.set_ylabel("Dice")
    ax.set_ylim(0.0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_metric_distributions(samples: dict, outdir, stem: str = "morphometry") -> list[Path]:
    """Histogram + empirical CDF per metric, one figure each, groups overlaid.

    ``samples`` maps group -> metric -> 1D array (see
    morphometry.records_by_metric).
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    metrics = sorted({m for g in samples.values() for m in g})
    paths = []
    for metric in metrics:
        fig, (axh, axc) = plt.subplots(1, 2, figsize=(9, 3.4))
        for group in sorted(samples):
            vals = np.asarray(samples[group].get(metric, ()), dtype=float)
            if vals.size == 0:
                continue
            axh.hist(vals, bins=20, alpha=0.5, label=group)
            xs = np.sort(vals)
            axc.step(xs, np.arange(1, len(xs) + 1) / len(xs), where="post", label=group)
        axh.set_xlabel(metric)
        axh.set_ylabel("segments")
        axc.set_xlabel(metric)
        axc.set_ylabel("empirical CDF")
        axc.set_ylim(0.0, 1.02)
        if len(samples) > 1:
            axh.legend(fontsize=8)
        fig.tight_layout()
        p = outdir / f"{stem}_{metric}.png"
        fig.savefig(p, dpi=120)
        plt.close(fig)
        paths.append(p)
    return paths


def save_projection(vol_voxels: np.ndarray, path, title: str = "") -> Path:
    """Maximum-intensity projection along z, a quick visual sanity check."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mip = np.asarray(vol_voxels).max(axis=2)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(mip.T, origin="lower", cmap="gray")
    if title:
        ax.set_title(title)
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
