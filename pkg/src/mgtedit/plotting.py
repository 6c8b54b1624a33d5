"""Matplotlib figures written next to the CSV/JSON reports."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def plot_loss_curve(steps, losses, path, baseline=None):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(steps, losses, lw=1.2, color="#1f4e79")
    if baseline is not None:
        ax.axhline(baseline, ls="--", lw=0.8, color="gray", label="ln K")
        ax.legend(frameon=False)
    ax.set_xlabel("step")
    ax.set_ylabel("masked-token cross-entropy")
    fig.tight_layout()
    _save(fig, path)


def plot_attention_maps(maps, path, consolidated=None):
    """``maps``: list of (label, h x w array). ``consolidated`` is appended last."""
    items = list(maps)
    if consolidated is not None:
        items.append(("consolidated", consolidated))
    cols = min(4, len(items))
    rows = math.ceil(len(items) / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.2 * rows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for ax, (label, grid) in zip(axes.ravel(), items):
        ax.imshow(np.asarray(grid), cmap="magma", interpolation="nearest")
        ax.set_title(label, fontsize=9)
    fig.tight_layout()
    _save(fig, path)


def plot_edit(source_px, edited_px, hold_grid, path):
    fig, axes = plt.subplots(1, 3, figsize=(7.5, 2.8))
    axes[0].imshow(source_px, interpolation="nearest")
    axes[0].set_title("source", fontsize=9)
    axes[1].imshow(edited_px, interpolation="nearest")
    axes[1].set_title("edited", fontsize=9)
    axes[2].imshow(hold_grid, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
    axes[2].set_title("held tokens", fontsize=9)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    _save(fig, path)
