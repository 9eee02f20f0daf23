"""Static figures: score curves with ground-truth shading and localisation overlays."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Polygon  # noqa: E402


def _spans(labels):
    labels = np.asarray(labels).astype(int)
    edges = np.flatnonzero(np.diff(np.concatenate([[0], labels, [0]])))
    return list(zip(edges[::2], edges[1::2]))


def plot_scores(series, labels, path, title: str | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(8, 2.6))
    s = np.asarray(series.smoothed)
    lo, hi = s.min(), s.max()
    ax.plot((s - lo) / (hi - lo) if hi > lo else s * 0, color="tab:blue", lw=1.5, label="anomaly score")
    if labels is not None:
        for a, b in _spans(labels):
            ax.axvspan(a - 0.5, b - 0.5, color="tab:red", alpha=0.2, lw=0)
    ax.set_xlim(0, len(s) - 1)
    ax.set_ylim(0, 1.05)
    ax.set_xlabel("frame")
    ax.set_ylabel("score (min-max)")
    ax.set_title(title or f"video {series.video_id}")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_overlay(frame, score_map, regions, path, title: str | None = None) -> Path:
    frame = np.asarray(frame)
    fig, ax = plt.subplots(figsize=(3.2, 3.2))
    ax.imshow(frame[..., 0] if frame.shape[-1] == 1 else frame, cmap="gray", vmin=0, vmax=1)
    if score_map is not None:
        ax.imshow(score_map, cmap="inferno", alpha=0.35)
    for reg in regions:
        ax.add_patch(Polygon(reg.polygon, closed=True, fill=False, edgecolor="red", lw=1.5))
    ax.set_axis_off()
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
