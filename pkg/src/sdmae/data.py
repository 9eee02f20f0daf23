"""Video-frame datasets, event banks and synthetic-anomaly training samples.

On-disk layout::

    root/train/<video_id>/000000.png ...
    root/test/<video_id>/000000.png ...
    root/test_labels/<video_id>.txt          one 0/1 per line
    root/test_masks/<video_id>/000000.png    optional, binary

    bank/<event_id>/frames/000000.png ...
    bank/<event_id>/masks/000000.png ...
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .config import ExperimentConfig

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class DataError(RuntimeError):
    """Malformed dataset or event bank."""


@dataclass
class VideoSequence:
    video_id: str
    frames: np.ndarray  # (T, h, w, c) float32 in [0, 1]
    labels: np.ndarray | None = None  # (T,) int
    pixel_masks: np.ndarray | None = None  # (T, h, w) uint8

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class OverlayEvent:
    event_id: str
    clip: list[np.ndarray]  # (he, we, ce) float in [0, 1]
    masks: list[np.ndarray]  # (he, we) uint8 in {0, 1}

    def __len__(self) -> int:
        return len(self.clip)


@dataclass
class TrainingSample:
    input_frame: np.ndarray
    prev_frame: np.ndarray
    target_frame: np.ndarray
    anomaly_map: np.ndarray  # (h, w) in {0, 1}
    augmented: bool = False


# ----------------------------------------------------------------------------
# image io


def _image_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def read_image(path: Path, channels: int | None = None, size: tuple[int, int] | None = None) -> np.ndarray:
    """Read an image as (h, w, c) float32 in [0, 1]; ``size`` is (h, w)."""
    try:
        with Image.open(path) as im:
            if channels is None:
                im = im.convert("L") if im.mode in ("L", "1", "P", "I", "I;16") else im.convert("RGB")
            else:
                im = im.convert("L" if channels == 1 else "RGB")
            if size is not None and im.size != (size[1], size[0]):
                im = im.resize((size[1], size[0]), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return arr[:, :, None] if arr.ndim == 2 else arr


def read_mask(path: Path, size: tuple[int, int] | None = None) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("L")
            if size is not None and im.size != (size[1], size[0]):
                im = im.resize((size[1], size[0]), Image.NEAREST)
            return (np.asarray(im) > 127).astype(np.uint8)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode mask {path}: {exc}") from exc


def write_image(path: Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)).save(path)


def write_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)


def read_labels(path: Path) -> np.ndarray:
    values = [line.strip() for line in path.read_text().splitlines() if line.strip()]
    try:
        labels = np.array([int(v) for v in values], dtype=np.int64)
    except ValueError:
        raise DataError(f"labels in {path} must be 0/1 integers") from None
    if not np.isin(labels, (0, 1)).all():
        raise DataError(f"labels in {path} must be 0/1 integers")
    return labels


# ----------------------------------------------------------------------------
# loaders


def load_dataset(root: str | Path, cfg: ExperimentConfig, split: str = "train") -> list[VideoSequence]:
    root = Path(root)
    split_dir = root / split
    if not split_dir.is_dir():
        raise DataError(f"missing split directory {split_dir}")
    size = (cfg.frame_height, cfg.frame_width)
    labels_dir = root / f"{split}_labels"
    masks_dir = root / f"{split}_masks"
    if split == "train" and labels_dir.is_dir():
        warnings.warn(f"ignoring {labels_dir}: training videos are unlabeled", stacklevel=2)

    videos = []
    for vdir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
        files = _image_files(vdir)
        if not files:
            raise DataError(f"video {vdir.name} in {split_dir} has no frames")
        frames = np.stack([read_image(f, cfg.channels, size) for f in files])
        labels = masks = None
        if split != "train":
            lpath = labels_dir / f"{vdir.name}.txt"
            if lpath.is_file():
                labels = read_labels(lpath)
                if len(labels) != len(frames):
                    raise DataError(
                        f"video {vdir.name}: {len(labels)} labels for {len(frames)} frames"
                    )
            mdir = masks_dir / vdir.name
            if mdir.is_dir():
                mfiles = _image_files(mdir)
                if len(mfiles) != len(frames):
                    raise DataError(f"video {vdir.name}: {len(mfiles)} masks for {len(frames)} frames")
                masks = np.stack([read_mask(f, size) for f in mfiles])
        videos.append(VideoSequence(vdir.name, frames, labels, masks))
    if not videos:
        raise DataError(f"no videos under {split_dir}")
    log.info("loaded %d %s videos from %s", len(videos), split, root)
    return videos


def load_event_bank(root: str | Path) -> list[OverlayEvent]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"event bank not found: {root}")
    events = []
    for edir in sorted(p for p in root.iterdir() if p.is_dir()):
        fdir, mdir = edir / "frames", edir / "masks"
        if not fdir.is_dir():
            raise DataError(f"event {edir.name}: missing frames directory")
        if not mdir.is_dir():
            raise DataError(f"event {edir.name}: missing masks directory")
        ffiles, mfiles = _image_files(fdir), _image_files(mdir)
        if len(ffiles) != len(mfiles):
            raise DataError(f"event {edir.name}: {len(ffiles)} frames but {len(mfiles)} masks")
        if not ffiles:
            raise DataError(f"event {edir.name}: empty clip")
        clip = [read_image(f) for f in ffiles]
        masks = [read_mask(f) for f in mfiles]
        for i, (im, m) in enumerate(zip(clip, masks)):
            if im.shape[:2] != m.shape:
                raise DataError(f"event {edir.name}: frame {i} is {im.shape[:2]} but mask is {m.shape}")
        if not any(m.any() for m in masks):
            raise DataError(f"event {edir.name}: mask is empty")
        events.append(OverlayEvent(edir.name, clip, masks))
    return events


# ----------------------------------------------------------------------------
# synthetic anomalies


def _match_channels(img: np.ndarray, c: int) -> np.ndarray:
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[2] == c:
        return img
    if c == 1:
        return img[:, :, :3].mean(axis=2, keepdims=True)
    return np.repeat(img[:, :, :1], c, axis=2)


def composite_event(frame, event_frame, mask, position: tuple[int, int]):
    """Hard-paste ``event_frame`` onto ``frame`` where ``mask`` is set.

    Returns the composited frame and the (h, w) anomaly map.
    """
    frame = np.asarray(frame)
    squeeze = frame.ndim == 2
    if squeeze:
        frame = frame[:, :, None]
    h, w, c = frame.shape
    ev = _match_channels(np.asarray(event_frame, dtype=frame.dtype), c)
    mask = np.asarray(mask).astype(bool)
    eh, ew = mask.shape
    if ev.shape[:2] != (eh, ew):
        raise ValueError(f"event frame {ev.shape[:2]} and mask {mask.shape} differ in size")
    r, q = position
    if r < 0 or q < 0 or r + eh > h or q + ew > w:
        raise ValueError(f"event of size {eh}x{ew} at {position} does not fit a {h}x{w} frame")
    out = frame.copy()
    region = out[r:r + eh, q:q + ew]
    region[mask] = ev[mask]
    amap = np.zeros((h, w), dtype=np.uint8)
    amap[r:r + eh, q:q + ew] = mask
    return (out[:, :, 0] if squeeze else out), amap


def _fit_event(img: np.ndarray, mask: np.ndarray, h: int, w: int):
    eh, ew = mask.shape
    if eh <= h and ew <= w:
        return img, mask
    scale = min(h / eh, w / ew)
    size = (max(1, int(ew * scale)), max(1, int(eh * scale)))
    chans = [np.asarray(Image.fromarray(img[:, :, k].astype(np.float32)).resize(size, Image.BILINEAR))
             for k in range(img.shape[2])]
    m = np.asarray(Image.fromarray(mask.astype(np.uint8) * 255).resize(size, Image.NEAREST)) > 127
    return np.stack(chans, axis=2), m.astype(np.uint8)


def make_training_sample(
    clean_prev: np.ndarray,
    clean_cur: np.ndarray,
    bank: list[OverlayEvent],
    p: float,
    rng: np.random.Generator,
) -> TrainingSample:
    """Build one (input, prev, target, anomaly map) sample.

    With probability ``p`` an event is pasted onto ``clean_cur`` and its
    preceding clip frame onto ``clean_prev`` at the same position, so the
    overlay moves coherently between the two frames.  The target is always
    the clean current frame.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"augmentation probability must lie in [0, 1], got {p}")
    h, w = clean_cur.shape[:2]
    if rng.random() >= p:
        return TrainingSample(clean_cur, clean_prev, clean_cur, np.zeros((h, w), dtype=np.uint8))
    if not bank:
        raise DataError("augmentation requested but the event bank is empty")
    event = bank[rng.integers(len(bank))]
    k = int(rng.integers(1, len(event))) if len(event) > 1 else 0
    cur_img, cur_mask = _fit_event(event.clip[k], event.masks[k], h, w)
    prev_img, prev_mask = _fit_event(event.clip[max(k - 1, 0)], event.masks[max(k - 1, 0)], h, w)
    eh = max(cur_mask.shape[0], prev_mask.shape[0])
    ew = max(cur_mask.shape[1], prev_mask.shape[1])
    pos = (int(rng.integers(0, h - eh + 1)), int(rng.integers(0, w - ew + 1)))
    inp, amap = composite_event(clean_cur, cur_img, cur_mask, pos)
    prev, _ = composite_event(clean_prev, prev_img, prev_mask, pos)
    return TrainingSample(inp, prev, clean_cur, amap, augmented=True)
