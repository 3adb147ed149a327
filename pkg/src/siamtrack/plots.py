"""Headless figure output: metric curves and attention heat maps."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def save_success_plot(curves: dict[str, np.ndarray],
                      path: str | Path) -> Path:
    """Overlap threshold vs success rate, one line per label."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, curve in curves.items():
        xs = np.linspace(0, 1, len(curve))
        ax.plot(xs, curve, label=f"{label} [{float(np.mean(curve)):.3f}]")
    ax.set_xlabel("overlap threshold")
    ax.set_ylabel("success rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_precision_plot(curves: dict[str, np.ndarray], max_px: float,
                        path: str | Path) -> Path:
    """Centre-error threshold vs precision, one line per label."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, curve in curves.items():
        xs = np.linspace(0, max_px, len(curve))
        ax.plot(xs, curve, label=label)
    ax.set_xlabel("centre error threshold (px)")
    ax.set_ylabel("precision")
    ax.set_xlim(0, max_px)
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_heatmap(data: np.ndarray, path: str | Path,
                 title: str = "") -> Path:
    """Single matrix as an annotated heat map image."""
    fig, ax = plt.subplots(figsize=(4.2, 4))
    im = ax.imshow(data, cmap="viridis")
    if title:
        ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def save_overlay(frame: np.ndarray, boxes: dict[str, np.ndarray],
                 path: str | Path) -> Path:
    """Frame with top-left-format boxes drawn and labelled."""
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(frame[..., ::-1] if frame.ndim == 3 else frame, cmap="gray")
    colors = ["lime", "red", "cyan", "yellow"]
    for i, (label, box) in enumerate(boxes.items()):
        rect = plt.Rectangle((box[0], box[1]), box[2], box[3], fill=False,
                             edgecolor=colors[i % len(colors)], linewidth=1.5,
                             label=label)
        ax.add_patch(rect)
    ax.legend(fontsize=8)
    ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
