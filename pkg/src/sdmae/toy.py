"""Deterministic toy surveillance scene for desk-scale runs.

A static textured background is crossed by small dark sprites moving slowly
along three horizontal lanes.  Test videos additionally contain anomalous
objects: oversized sprites drifting vertically across the lanes, or
mid-sized sprites moving fast along a diagonal.  A separate bank of
differently shaped events is written for training-time augmentation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data import write_image, write_mask

LANES = (12, 32, 52)  # lane centre rows, as fractions of 64


@dataclass(frozen=True)
class ToyParams:
    size: int = 64
    train_videos: int = 8
    test_videos: int = 4
    frames: int = 120
    sprite: int = 6
    sprite_speed: int = 1
    events: int = 6
    event_frames: int = 12
    noise: float = 0.01


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.random((8, 8)).astype(np.float32)
    im = Image.fromarray(coarse).resize((size, size), Image.BICUBIC)
    bg = np.asarray(im, dtype=np.float64)
    bg = (bg - bg.min()) / max(bg.max() - bg.min(), 1e-9)
    yy, xx = np.mgrid[0:size, 0:size]
    stripes = 0.04 * np.sin(2 * np.pi * (xx + 2 * yy) / 11.0)
    return 0.42 + 0.3 * bg + stripes


def _paint(frame, mask, top, left, shape_mask, value):
    h, w = frame.shape
    sh, sw = shape_mask.shape
    r0, c0 = max(top, 0), max(left, 0)
    r1, c1 = min(top + sh, h), min(left + sw, w)
    if r0 >= r1 or c0 >= c1:
        return
    sub = shape_mask[r0 - top:r1 - top, c0 - left:c1 - left]
    frame[r0:r1, c0:c1][sub] = value
    if mask is not None:
        mask[r0:r1, c0:c1] |= sub


def _lane_sprites(rng, p: ToyParams):
    """One sprite per lane: (row, start column, direction, intensity)."""
    span = p.size + p.sprite
    lanes = []
    for lane in LANES:
        row = int(round(lane * p.size / 64)) - p.sprite // 2
        lanes.append((row, int(rng.integers(span)), int(rng.choice((-1, 1))), 0.08 + 0.08 * rng.random()))
    return lanes


def _normal_frame(bg, lanes, t, p: ToyParams, rng):
    frame = bg.copy()
    block = np.ones((p.sprite, p.sprite), dtype=bool)
    span = p.size + p.sprite
    for row, start, direction, value in lanes:
        col = (start + direction * p.sprite_speed * t) % span - p.sprite
        _paint(frame, None, row, col, block, value)
    return frame


def _anomaly_track(rng, p: ToyParams, length: int):
    """Positions and shape of one anomalous object over ``length`` frames."""
    s = p.size
    if rng.random() < 0.5:
        side = int(round(14 * s / 64))
        shape = np.ones((side, side), dtype=bool)
        col = int(rng.integers(0, s - side))
        row0 = int(rng.integers(0, s - side))
        step = int(rng.choice((-1, 1)))
        rows = [row0 + step * t for t in range(length)]
        cols = [col] * length
    else:
        side = int(round(9 * s / 64))
        shape = np.ones((side, side), dtype=bool)
        r, c = int(rng.integers(0, s - side)), int(rng.integers(0, s - side))
        vr, vc = int(rng.choice((-4, 4))), int(rng.choice((-3, 3)))
        rows, cols = [], []
        for _ in range(length):
            rows.append(r)
            cols.append(c)
            r, c = r + vr, c + vc
            if not 0 <= r <= s - side:
                vr = -vr
                r = min(max(r, 0), s - side)
            if not 0 <= c <= s - side:
                vc = -vc
                c = min(max(c, 0), s - side)
    # bounce vertical drifts off the borders
    lo, hi = 0, s - shape.shape[0]
    rows = [int(abs(((r - lo) + (hi - lo)) % (2 * (hi - lo)) - (hi - lo)) + lo) for r in rows]
    return shape, rows, cols, 0.03 + 0.05 * rng.random()


def _anomaly_spans(rng, n_frames: int) -> list[tuple[int, int]]:
    """One or two disjoint abnormal spans, always leaving normal frames around them."""
    count = 1 if n_frames < 80 or rng.random() < 0.5 else 2
    seg = n_frames // count
    spans = []
    for k in range(count):
        lo = k * seg
        length = int(rng.integers(max(seg // 4, 2), max(seg // 2, 3)))
        start = lo + int(rng.integers(max(seg // 8, 1), max(seg - length - 1, seg // 8 + 2)))
        spans.append((start, min(start + length, lo + seg - 1, n_frames - 1)))
    return spans


def _event_shape(kind: int, side: int, t: int) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side]
    c = (side - 1) / 2.0
    dy, dx = yy - c, xx - c
    wobble = 1.0 + 0.1 * np.sin(t)
    if kind == 0:  # plus sign
        arm = max(side // 5, 1)
        return (np.abs(dy) <= arm) | (np.abs(dx) <= arm)
    if kind == 1:  # ring
        r = np.hypot(dy, dx)
        return (r <= c * wobble) & (r >= c * 0.55)
    if kind == 2:  # triangle
        return (yy >= side - 1 - 2 * (c - np.abs(dx)) * wobble)
    if kind == 3:  # diamond
        return np.abs(dy) + np.abs(dx) <= c * wobble
    if kind == 4:  # X
        arm = max(side // 6, 1)
        return (np.abs(dy - dx) <= arm) | (np.abs(dy + dx) <= arm)
    return (np.abs(dy) <= c * wobble) & (xx <= side // 2 + 1) | (yy >= side - max(side // 3, 2))  # L-ish


def _write_video(directory: Path, frames) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for t, f in enumerate(frames):
        write_image(directory / f"{t:06d}.png", f)


def generate_toy_dataset(out: str | Path, params: ToyParams | None = None, seed: int = 0) -> str:
    """Write the toy dataset and event bank under ``out``; return the manifest text."""
    p = params or ToyParams()
    out = Path(out)
    rng = np.random.default_rng(seed)
    bg = _background(rng, p.size)

    def noisy(frame):
        return np.clip(frame + p.noise * rng.standard_normal(frame.shape), 0.0, 1.0)

    for v in range(p.train_videos):
        lanes = _lane_sprites(rng, p)
        frames = [noisy(_normal_frame(bg, lanes, t, p, rng)) for t in range(p.frames)]
        _write_video(out / "train" / f"{v:02d}", frames)

    (out / "test_labels").mkdir(parents=True, exist_ok=True)
    abnormal_total = 0
    for v in range(p.test_videos):
        vid = f"{v:02d}"
        lanes = _lane_sprites(rng, p)
        frames, masks = [], []
        for t in range(p.frames):
            frames.append(_normal_frame(bg, lanes, t, p, rng))
            masks.append(np.zeros((p.size, p.size), dtype=bool))
        for start, stop in _anomaly_spans(rng, p.frames):
            shape, rows, cols, value = _anomaly_track(rng, p, stop - start + 1)
            for k, t in enumerate(range(start, stop + 1)):
                _paint(frames[t], masks[t], rows[k], cols[k], shape, value)
        frames = [noisy(f) for f in frames]
        labels = [int(m.any()) for m in masks]
        abnormal_total += sum(labels)
        _write_video(out / "test" / vid, frames)
        mdir = out / "test_masks" / vid
        mdir.mkdir(parents=True, exist_ok=True)
        for t, m in enumerate(masks):
            write_mask(mdir / f"{t:06d}.png", m)
        (out / "test_labels" / f"{vid}.txt").write_text("".join(f"{x}\n" for x in labels))

    for e in range(p.events):
        kind = e % 6
        side = int(rng.integers(10, 17)) * p.size // 64
        value = 0.04 + 0.2 * rng.random()
        edir = out / "bank" / f"event_{e:02d}"
        (edir / "frames").mkdir(parents=True, exist_ok=True)
        (edir / "masks").mkdir(parents=True, exist_ok=True)
        for t in range(p.event_frames):
            shape = _event_shape(kind, side, t)
            texture = value + 0.05 * np.sin(np.arange(side)[None, :] * 0.9 + t)
            img = np.where(shape, texture, 0.0) * np.ones((side, side))
            write_image(edir / "frames" / f"{t:06d}.png", img)
            write_mask(edir / "masks" / f"{t:06d}.png", shape)

    manifest = (
        f"seed = {seed}\n"
        + "".join(f"{k} = {v}\n" for k, v in asdict(p).items())
        + f"train_videos_written = {p.train_videos}\n"
        + f"test_videos_written = {p.test_videos}\n"
        + f"abnormal_test_frames = {abnormal_total}\n"
        + f"bank_events = {p.events}\n"
    )
    (out / "manifest.txt").write_text(manifest)
    return manifest
