"""Figures written next to the text reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

ARM_COLORS = {"baseline": "#969696", "enhanced": "#50a2d5"}


def _save(fig, path):
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)


def plot_loss_curve(losses, steps_per_epoch: int, path) -> None:
    """Per-batch loss with the per-epoch mean overlaid."""
    losses = np.asarray(losses, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(np.arange(len(losses)), losses, lw=0.6, color="#bbbbbb", label="batch")
    if steps_per_epoch and len(losses):
        n_epochs = int(np.ceil(len(losses) / steps_per_epoch))
        means = [losses[i * steps_per_epoch : (i + 1) * steps_per_epoch].mean() for i in range(n_epochs)]
        centers = (np.arange(n_epochs) + 0.5) * steps_per_epoch
        ax.plot(centers, means, marker="o", ms=3, color="#eb3920", label="epoch mean")
    ax.set_xlabel("step")
    ax.set_ylabel("noise MSE")
    ax.set_yscale("log")
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    ax.legend(frameon=False)
    _save(fig, path)


def plot_sample_grid(images, labels, path, title: str = "", max_per_class: int = 8) -> None:
    """One row per class; ``images`` are (N, 3, H, W) in [0, 1]."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    cols = min(max_per_class, max(int(np.sum(labels == k)) for k in classes))
    fig, axes = plt.subplots(len(classes), cols, figsize=(cols * 0.8, len(classes) * 0.8), squeeze=False)
    for r, k in enumerate(classes):
        picks = images[labels == k][:cols]
        for c in range(cols):
            ax = axes[r, c]
            ax.axis("off")
            if c < len(picks):
                ax.imshow(picks[c].transpose(1, 2, 0), interpolation="nearest")
    if title:
        fig.suptitle(title, fontsize=9)
    _save(fig, path)


def plot_fid_comparison(outcomes, path) -> None:
    """Grouped bars of baseline and enhanced FID for each training seed."""
    seeds = [o.seed for o in outcomes]
    x = np.arange(len(seeds))
    fig, ax = plt.subplots(figsize=(1.2 * len(seeds) + 2, 3.5))
    ax.bar(x - 0.2, [o.baseline.fid for o in outcomes], 0.4, label="baseline", color=ARM_COLORS["baseline"])
    ax.bar(x + 0.2, [o.enhanced.fid for o in outcomes], 0.4, label="EMA + guidance", color=ARM_COLORS["enhanced"])
    ax.set_xticks(x, [f"seed {s}" for s in seeds])
    ax.set_ylabel("Frechet distance (projected features)")
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    ax.legend(frameon=False)
    _save(fig, path)
