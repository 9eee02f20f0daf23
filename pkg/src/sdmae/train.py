"""Two-stage optimisation: teacher reconstruction, then student self-distillation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from . import motion
from .config import ExperimentConfig, validate_config
from .data import OverlayEvent, VideoSequence, make_training_sample
from .model import PatchGrid, SelfDistilledMAE, frames_to_tensor, init_model, patchify_tensor, sample_mask

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainState:
    stage: str
    epoch: int = 0
    optimizer: dict = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    loss_history: list[float] = field(default_factory=list)


# ----------------------------------------------------------------------------
# losses


def _tokens(x) -> torch.Tensor:
    if isinstance(x, PatchGrid):
        x = x.patches.reshape(x.n, -1)
    t = torch.as_tensor(x)
    if t.ndim > 3:  # (n, d, d, c) patches
        t = t.reshape(t.shape[0], -1)
    return t


def _weighted_sse(a, b, weights) -> torch.Tensor:
    a, b = _tokens(a), _tokens(b)
    if a.shape != b.shape:
        raise ValueError(f"prediction {tuple(a.shape)} and target {tuple(b.shape)} differ")
    w = torch.as_tensor(weights, dtype=a.dtype)
    if w.shape != a.shape[:-1]:
        raise ValueError(f"weights {tuple(w.shape)} do not match {tuple(a.shape[:-1])} tokens")
    n = a.shape[-2]
    per_token = ((a - b.to(a.dtype)) ** 2).sum(dim=-1)
    return ((w * per_token).sum(dim=-1) / n).mean()


def teacher_loss(pred, target, weights) -> torch.Tensor:
    """(1/n) sum_i w_i ||p_i - p̂_i||^2, averaged over a leading batch axis if present."""
    return _weighted_sse(pred, target, weights)


def student_loss(student_pred, teacher_pred, weights) -> torch.Tensor:
    """Distillation loss; the teacher output is a constant target."""
    teacher_pred = _tokens(teacher_pred).detach()
    return _weighted_sse(student_pred, teacher_pred, weights)


# ----------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    inputs: torch.Tensor  # (B, c, h, w)
    targets: torch.Tensor  # (B, n, d*d*c')
    weights: torch.Tensor  # (B, n)
    visible: torch.Tensor  # (B, n_visible)
    augmented: int


def build_batch(
    items: Sequence[tuple[int, int]],
    videos: Sequence[VideoSequence],
    bank: Sequence[OverlayEvent],
    cfg: ExperimentConfig,
    rng: np.random.Generator,
) -> Batch:
    n, d = cfg.num_tokens, cfg.patch_size
    inputs, targets, weights, visible = [], [], [], []
    augmented = 0
    for vi, t in items:
        frames = videos[vi].frames
        cur = frames[t]
        has_prev = t > 0
        sample = make_training_sample(frames[t - 1] if has_prev else cur, cur, bank,
                                      cfg.augment_probability, rng)
        augmented += sample.augmented
        if cfg.motion_weighting:
            w = motion.frame_weights(sample.prev_frame if has_prev else None, sample.input_frame, d,
                                     sample.anomaly_map if sample.augmented else None)
        else:
            w = np.full(n, 1.0 / n)
        plan = sample_mask(n, cfg.mask_ratio, rng)
        if cfg.loss_on_masked_only:
            keep = np.zeros(n)
            keep[plan.masked] = 1.0
            w = w * keep
        target = sample.target_frame
        if cfg.predict_anomaly_map:
            target = np.concatenate([target, sample.anomaly_map[:, :, None].astype(target.dtype)], axis=2)
        inputs.append(sample.input_frame)
        targets.append(target)
        weights.append(w)
        visible.append(plan.visible)
    tgt = patchify_tensor(frames_to_tensor(np.stack(targets)), d)
    return Batch(
        frames_to_tensor(np.stack(inputs)),
        tgt,
        torch.as_tensor(np.stack(weights), dtype=torch.float32),
        torch.as_tensor(np.stack(visible), dtype=torch.long),
        augmented,
    )


def _epoch_items(videos, rng) -> list[tuple[int, int]]:
    items = [(vi, t) for vi, v in enumerate(videos) for t in range(len(v))]
    order = rng.permutation(len(items))
    return [items[i] for i in order]


def _check_inputs(videos, bank, cfg):
    if not videos or not any(len(v) for v in videos):
        raise TrainingError("training set is empty")
    if cfg.augment_probability > 0 and not bank:
        raise TrainingError("augment_probability > 0 but the event bank is empty")
    shape = (cfg.frame_height, cfg.frame_width, cfg.channels)
    for v in videos:
        if v.frames.shape[1:] != shape:
            raise TrainingError(f"video {v.video_id} frames are {v.frames.shape[1:]}, config expects {shape}")


EpochCallback = Callable[[str, int, float, SelfDistilledMAE], None]


def _run_epochs(model, params, loss_fn, videos, bank, cfg, rng, epochs, stage, on_epoch):
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    state = TrainState(stage=stage)
    for epoch in range(1, epochs + 1):
        items = _epoch_items(videos, rng)
        total, count = 0.0, 0
        for start in range(0, len(items), cfg.batch_size):
            batch = build_batch(items[start:start + cfg.batch_size], videos, bank, cfg, rng)
            loss = loss_fn(model, batch)
            if not torch.isfinite(loss):
                raise TrainingError(f"{stage} loss became {loss.item()} at epoch {epoch}, step {start // cfg.batch_size}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(batch.inputs)
            count += len(batch.inputs)
        mean = total / count
        state.epoch = epoch
        state.loss_history.append(mean)
        log.info("%s epoch %d/%d mean loss %.6g", stage, epoch, epochs, mean)
        if on_epoch is not None:
            on_epoch(stage, epoch, mean, model)
    state.optimizer = opt.state_dict()
    state.rng_state = rng.bit_generator.state
    return state


def _teacher_step(model, batch):
    teacher, _ = model(batch.inputs, batch.visible)
    return teacher_loss(teacher, batch.targets, batch.weights)


def _student_step(model, batch):
    with torch.no_grad():
        latent = model.encoder(batch.inputs, batch.visible)
        h1 = model.teacher_decoder.first_block(latent, batch.visible)
        teacher = model.teacher_decoder.rest(h1)
    return student_loss(model.student_decoder(h1), teacher, batch.weights)


def train_teacher(
    videos: Sequence[VideoSequence],
    bank: Sequence[OverlayEvent],
    cfg: ExperimentConfig,
    seed: int | None = None,
    model: SelfDistilledMAE | None = None,
    on_epoch: EpochCallback | None = None,
) -> tuple[SelfDistilledMAE, TrainState]:
    """Stage 1: optimise encoder and teacher decoder with the weighted loss."""
    validate_config(cfg)
    _check_inputs(videos, bank, cfg)
    seed = cfg.seed if seed is None else seed
    model = init_model(cfg, seed) if model is None else model
    rng = np.random.default_rng([seed, 1])
    params = list(model.teacher_parameters())
    for p in model.parameters():
        p.requires_grad_(False)
    for p in params:
        p.requires_grad_(True)
    model.train()
    state = _run_epochs(model, params, _teacher_step, videos, bank, cfg, rng,
                        cfg.teacher_epochs, "teacher", on_epoch)
    for p in model.parameters():
        p.requires_grad_(True)
    model.stage = "teacher"
    model.eval()
    return model, state


def distill_student(
    videos: Sequence[VideoSequence],
    bank: Sequence[OverlayEvent],
    cfg: ExperimentConfig,
    model: SelfDistilledMAE,
    seed: int | None = None,
    on_epoch: EpochCallback | None = None,
) -> tuple[SelfDistilledMAE, TrainState]:
    """Stage 2: freeze encoder and teacher decoder, fit the student to the teacher."""
    validate_config(cfg)
    if model is None or model.stage not in ("teacher", "student"):
        raise TrainingError("distillation needs a trained teacher (checkpoint stage 'teacher')")
    if model.fingerprint != cfg.fingerprint():
        raise TrainingError("model was built for a different architecture than the config")
    _check_inputs(videos, bank, cfg)
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng([seed, 2])
    for p in model.parameters():
        p.requires_grad_(False)
    params = list(model.student_decoder.parameters())
    for p in params:
        p.requires_grad_(True)
    model.train()
    state = _run_epochs(model, params, _student_step, videos, bank, cfg, rng,
                        cfg.student_epochs, "student", on_epoch)
    for p in model.parameters():
        p.requires_grad_(True)
    model.stage = "student"
    model.eval()
    return model, state


def write_log(path, history: Sequence[float]) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,mean_loss\n")
        for i, loss in enumerate(history, 1):
            fh.write(f"{i},{float(loss)!r}\n")
