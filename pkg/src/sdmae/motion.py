"""Motion-gradient token weights.

Frames and maps are ``(h, w, c)`` float arrays.  Patches are indexed in
row-major order over the ``(h/d, w/d)`` grid, the same order used by
:func:`sdmae.model.patchify`.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import median_filter


def _as_hwc(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ValueError(f"expected an (h, w, c) array, got shape {a.shape}")
    return a


def median_filter3(frame: np.ndarray) -> np.ndarray:
    """Per-channel 3x3 median with edge-replicated borders."""
    frame = _as_hwc(frame)
    return median_filter(frame, size=(3, 3, 1), mode="nearest")


def motion_gradient(prev: np.ndarray, cur: np.ndarray) -> np.ndarray:
    prev, cur = _as_hwc(prev), _as_hwc(cur)
    if prev.shape != cur.shape:
        raise ValueError(f"frame shapes differ: {prev.shape} vs {cur.shape}")
    return np.abs(median_filter3(cur) - median_filter3(prev))


def patch_motion_stats(grad: np.ndarray, d: int) -> np.ndarray:
    """Mean over channels of the per-channel maximum inside each d x d patch."""
    grad = _as_hwc(grad)
    h, w, c = grad.shape
    if h % d or w % d:
        raise ValueError(f"map of size {h}x{w} is not divisible by patch size {d}")
    blocks = grad.reshape(h // d, d, w // d, d, c)
    return blocks.max(axis=(1, 3)).mean(axis=-1).reshape(-1)


def token_weights(m: np.ndarray) -> np.ndarray:
    """Normalise motion statistics to sum to one.

    A frame pair without motion (all m == 0) gets uniform weights.
    """
    m = np.asarray(m, dtype=np.float64)
    if np.any(m < 0):
        raise ValueError("motion statistics must be non-negative")
    total = m.sum()
    if total <= 0:
        return np.full(m.shape, 1.0 / m.size)
    return m / total


def fuse_anomaly(grad: np.ndarray, anomaly_map: np.ndarray) -> np.ndarray:
    """Add a binary (h, w) anomaly map to every channel of a gradient map."""
    grad = _as_hwc(grad)
    anomaly_map = np.asarray(anomaly_map, dtype=np.float64)
    if anomaly_map.ndim == 3:
        anomaly_map = anomaly_map[..., 0]
    if anomaly_map.shape != grad.shape[:2]:
        raise ValueError(f"anomaly map {anomaly_map.shape} does not match gradient {grad.shape[:2]}")
    return grad + anomaly_map[:, :, None]


def frame_weights(
    prev: np.ndarray | None,
    cur: np.ndarray,
    d: int,
    anomaly_map: np.ndarray | None = None,
) -> np.ndarray:
    """Token weights for one training frame.

    ``prev=None`` marks the first frame of a video, whose gradient is all zero.
    """
    cur = _as_hwc(cur)
    grad = np.zeros_like(cur) if prev is None else motion_gradient(prev, cur)
    if anomaly_map is not None:
        grad = fuse_anomaly(grad, anomaly_map)
    return token_weights(patch_motion_stats(grad, d))
