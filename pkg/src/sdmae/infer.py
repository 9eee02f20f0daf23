"""Pixel-level anomaly maps, smoothing, frame scores and patch localisation."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.ndimage import gaussian_filter1d, label, uniform_filter

from .config import ExperimentConfig
from .data import VideoSequence, write_image
from .model import SelfDistilledMAE, frames_to_tensor, sample_mask, unpatchify_tensor

NEEDS_STUDENT = {"T_S", "T_TSD", "T_S_TSD"}


class ScoringError(RuntimeError):
    pass


@dataclass
class ScoreSeries:
    video_id: str
    raw: np.ndarray
    smoothed: np.ndarray

    def __len__(self) -> int:
        return len(self.raw)


def _sq(a, b) -> np.ndarray:
    return ((a - b) ** 2).sum(axis=-1)


def anomaly_map(x, x_teacher, x_student, strategy: str = "T_TSD", predicted_map=None) -> np.ndarray:
    """Per-pixel anomaly map from channel-summed squared differences.

    Works on (h, w, c) frames or (B, h, w, c) stacks.  ``predicted_map`` is
    the teacher's anomaly channel; it is clamped to [0, 1], squared and added.
    """
    x, xt, xs = (np.asarray(a, dtype=np.float64) for a in (x, x_teacher, x_student))
    if not x.shape == xt.shape == xs.shape:
        raise ValueError(f"frame shapes differ: {x.shape}, {xt.shape}, {xs.shape}")
    teacher = _sq(x, xt)
    if strategy == "T":
        out = teacher
    elif strategy == "T_S":
        out = teacher + _sq(x, xs)
    elif strategy == "T_TSD":
        out = teacher + _sq(xt, xs)
    elif strategy == "T_S_TSD":
        out = teacher + _sq(x, xs) + _sq(xt, xs)
    else:
        raise ValueError(f"unknown score strategy {strategy!r}")
    if predicted_map is not None:
        pm = np.asarray(predicted_map, dtype=np.float64)
        if pm.shape == out.shape + (1,):
            pm = pm[..., 0]
        if pm.shape != out.shape:
            raise ValueError(f"predicted map {pm.shape} does not match frames {out.shape}")
        out = out + np.clip(pm, 0.0, 1.0) ** 2
    return out


def smooth_volume(maps, kernel: tuple[int, int, int] = (5, 5, 5)) -> np.ndarray:
    """3-D mean filter over a (T, h, w) stack with edge-replicated borders."""
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim != 3 or len(maps) == 0:
        raise ValueError(f"expected a non-empty (T, h, w) stack, got {maps.shape}")
    if len(kernel) != 3 or any(k < 1 or k % 2 == 0 for k in kernel):
        raise ValueError(f"kernel entries must be odd and >= 1, got {kernel}")
    return uniform_filter(maps, size=tuple(kernel), mode="nearest")


def temporal_gaussian(raw, sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    return gaussian_filter1d(np.asarray(raw, dtype=np.float64), sigma, mode="nearest", truncate=4.0)


def frame_scores(maps, sigma: float, video_id: str = "") -> ScoreSeries:
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim != 3 or len(maps) == 0:
        raise ValueError(f"expected a non-empty (T, h, w) stack, got {maps.shape}")
    raw = maps.reshape(len(maps), -1).max(axis=1)
    return ScoreSeries(video_id, raw, temporal_gaussian(raw, sigma))


def inference_plan(cfg: ExperimentConfig, video_id: str, t: int):
    rng = np.random.default_rng([cfg.seed, zlib.crc32(video_id.encode()), t])
    return sample_mask(cfg.num_tokens, cfg.inference_mask_ratio, rng)


def raw_maps(
    model: SelfDistilledMAE,
    frames: np.ndarray,
    plans,
    strategy: str,
    use_predicted_map: bool,
) -> np.ndarray:
    """Unsmoothed anomaly maps for a stack of frames with given mask plans."""
    cfg = model.cfg
    d, c = cfg.patch_size, cfg.channels
    visible = torch.as_tensor(np.stack([p.visible for p in plans]), dtype=torch.long)
    with torch.inference_mode():
        t, s = model(frames_to_tensor(frames), visible)
        xt = unpatchify_tensor(t, d, cfg.grid).permute(0, 2, 3, 1).numpy()
        xs = unpatchify_tensor(s, d, cfg.grid).permute(0, 2, 3, 1).numpy()
    pred = xt[..., c] if (use_predicted_map and cfg.predict_anomaly_map) else None
    return anomaly_map(frames, xt[..., :c], xs[..., :c], strategy, pred)


def score_video(
    model: SelfDistilledMAE,
    video: VideoSequence,
    cfg: ExperimentConfig,
    batch_size: int = 64,
    allow_untrained: bool = False,
) -> tuple[ScoreSeries, np.ndarray]:
    """Score every frame of a video; returns the series and the smoothed maps."""
    strategy = cfg.score_strategy
    if strategy in NEEDS_STUDENT and model.stage != "student" and not allow_untrained:
        raise ScoringError(f"strategy {strategy} needs a distilled student (model stage is {model.stage!r})")
    if model.fingerprint != cfg.fingerprint():
        raise ScoringError("model was built for a different architecture than the config")
    model.eval()
    maps = []
    for start in range(0, len(video), batch_size):
        frames = video.frames[start:start + batch_size]
        plans = [inference_plan(cfg, video.video_id, t) for t in range(start, start + len(frames))]
        maps.append(raw_maps(model, frames, plans, strategy, cfg.predict_anomaly_map))
    smoothed = smooth_volume(np.concatenate(maps), cfg.smooth_kernel)
    return frame_scores(smoothed, cfg.gaussian_sigma, video.video_id), smoothed


# ----------------------------------------------------------------------------
# localisation


@dataclass
class Region:
    polygon: list[tuple[float, float]]  # (x, y) hull vertices, counter-clockwise
    box: tuple[float, float, float, float]  # x0, y0, x1, y1


def convex_hull(points) -> list[tuple[float, float]]:
    """Andrew's monotone chain; collinear points are dropped."""
    pts = sorted(set(map(tuple, points)))
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def localize(score_map, d: int, threshold: float) -> list[Region]:
    """Group patches with mean score above ``threshold`` into hull regions."""
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    m = np.asarray(score_map, dtype=np.float64)
    h, w = m.shape
    gh, gw = h // d, w // d
    means = m[:gh * d, :gw * d].reshape(gh, d, gw, d).mean(axis=(1, 3))
    labels, count = label(means > threshold, structure=np.ones((3, 3), dtype=int))
    regions = []
    for k in range(1, count + 1):
        corners = []
        for r, c in zip(*np.nonzero(labels == k)):
            x0, y0 = c * d, r * d
            corners += [(x0, y0), (x0 + d, y0), (x0, y0 + d), (x0 + d, y0 + d)]
        hull = convex_hull(corners)
        xs, ys = [p[0] for p in hull], [p[1] for p in hull]
        regions.append(Region([(float(x), float(y)) for x, y in hull],
                              (float(min(xs)), float(min(ys)), float(max(xs)), float(max(ys)))))
    return regions


# ----------------------------------------------------------------------------
# outputs


def write_scores_csv(path, series: ScoreSeries) -> None:
    with open(path, "w") as fh:
        fh.write("frame_index,raw_score,smoothed_score\n")
        for t, (r, s) in enumerate(zip(series.raw, series.smoothed)):
            fh.write(f"{t},{float(r)!r},{float(s)!r}\n")


def read_scores_csv(path) -> ScoreSeries:
    path = Path(path)
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return ScoreSeries(path.stem, data[:, 1].copy(), data[:, 2].copy())


def write_localization_csv(path, regions_per_frame: Sequence[list[Region]]) -> None:
    with open(path, "w") as fh:
        fh.write("frame_index,x0,y0,x1,y1\n")
        for t, regions in enumerate(regions_per_frame):
            for reg in regions:
                fh.write(f"{t},{reg.box[0]:g},{reg.box[1]:g},{reg.box[2]:g},{reg.box[3]:g}\n")


def write_map_images(directory, maps) -> tuple[float, float]:
    """Min-max scaled grayscale PNGs plus a ``scale.txt`` sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lo, hi = float(np.min(maps)), float(np.max(maps))
    span = hi - lo if hi > lo else 1.0
    for t, m in enumerate(maps):
        write_image(directory / f"{t:06d}.png", (m - lo) / span)
    (directory / "scale.txt").write_text(f"min = {lo!r}\nmax = {hi!r}\n")
    return lo, hi
