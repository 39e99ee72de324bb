"""Report figures, rendered to files with the Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .costs import CostReport  # noqa: E402
from .nonlocal_blocks import AttentionDump  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_loss_curve(losses: Sequence[float], lrs: Sequence[float], path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = np.arange(1, len(losses) + 1)
    ax.semilogy(steps, losses, lw=0.8, color="tab:blue", label="loss")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    twin = ax.twinx()
    twin.plot(steps, lrs, lw=1.0, color="tab:orange", label="lr")
    twin.set_ylabel("learning rate")
    fig.legend(loc="upper right")
    return _save(fig, path)


def _display(img: np.ndarray) -> np.ndarray:
    img = np.clip(img, 0, 1)
    return img[0] if img.shape[0] == 1 else np.moveaxis(img, 0, -1)


def plot_attention(image: np.ndarray, dumps: Sequence[AttentionDump], path) -> Path:
    """The query pixel on the input, followed by one weight map per scale."""
    fig, axes = plt.subplots(1, len(dumps) + 1, figsize=(3 * (len(dumps) + 1), 3))
    axes = np.atleast_1d(axes)
    py, px = dumps[0].pixel
    axes[0].imshow(_display(image), cmap="gray", vmin=0, vmax=1)
    axes[0].plot(px, py, "r+", ms=12, mew=2)
    axes[0].set_title("query")
    for ax, dump in zip(axes[1:], dumps):
        im = ax.imshow(dump.weights, cmap="viridis", interpolation="nearest")
        ax.set_title(f"scale {dump.scale}  {dump.weights.shape[0]}x{dump.weights.shape[1]}")
        fig.colorbar(im, ax=ax, fraction=0.046)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    return _save(fig, path)


def plot_costs(reports: Mapping[str, CostReport], path) -> Path:
    """GFLOPs and attention-map memory side by side for each variant."""
    names = list(reports)
    flops = [reports[k].total_flops / 1e9 for k in names]
    attn = [reports[k].attention_elements * 4 / 2**20 for k in names]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3.2))
    a1.bar(names, flops, color="tab:blue")
    a1.set_ylabel("GFLOPs")
    a2.bar(names, attn, color="tab:green")
    a2.set_ylabel("attention maps (MiB, f32)")
    for ax in (a1, a2):
        ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    return _save(fig, path)
