"""Throughput, parameter and FLOP reporting.

FPS covers the evaluation-mode forward pass plus anomaly-map construction.
Disk I/O and score smoothing are excluded, so numbers compare across
hosts in relative terms only.
"""

from __future__ import annotations

import os
import platform
import statistics
import time
from dataclasses import dataclass

import numpy as np
import torch

from .config import ExperimentConfig
from .infer import raw_maps
from .model import SelfDistilledMAE, count_parameters, estimate_flops, init_model, sample_mask

# values reported for the full-size model, printed next to ours
REFERENCE_PARAMS_M = 3.0
REFERENCE_GFLOPS = 0.8
REFERENCE_FPS = 1670


class BenchError(ValueError):
    pass


@dataclass
class BenchReport:
    fps_batch1: float
    fps_batch_n: float
    batch_n: int
    param_count: int
    flops_per_frame: float
    environment: str
    fps_mlp: float | None = None

    def format(self) -> str:
        lines = [
            f"params: {self.param_count} ({self.param_count / 1e6:.2f}M; reference {REFERENCE_PARAMS_M:g}M)",
            f"flops per frame: {self.flops_per_frame / 1e9:.3f} GFLOPs (reference {REFERENCE_GFLOPS:g})",
            f"fps batch 1: {self.fps_batch1:.1f}",
            f"fps batch {self.batch_n}: {self.fps_batch_n:.1f} (reference {REFERENCE_FPS} on a GPU)",
        ]
        if self.fps_mlp is not None:
            lines.append(f"fps batch {self.batch_n}, dense (mlp) blocks: {self.fps_mlp:.1f}")
        lines += [
            "protocol: forward + anomaly map, eval mode; excludes disk I/O and smoothing",
            f"environment: {self.environment}",
        ]
        return "\n".join(lines) + "\n"


def environment_note() -> str:
    return (f"{platform.platform()}; python {platform.python_version()}; torch {torch.__version__}; "
            f"{os.cpu_count()} cpus; {torch.get_num_threads()} torch threads")


def measure_fps(
    model: SelfDistilledMAE,
    cfg: ExperimentConfig,
    n_frames: int = 200,
    batch: int = 1,
    repeats: int = 5,
    warmup_batches: int = 10,
    seed: int = 0,
) -> float:
    """Median frames/second over ``repeats`` timed passes of ``n_frames`` frames."""
    if n_frames < 100:
        raise BenchError(f"need at least 100 frames for a stable measurement, got {n_frames}")
    if batch < 1:
        raise BenchError("batch must be >= 1")
    rng = np.random.default_rng(seed)
    frames = rng.random((batch, cfg.frame_height, cfg.frame_width, cfg.channels), dtype=np.float32)
    plans = [sample_mask(cfg.num_tokens, cfg.inference_mask_ratio, rng) for _ in range(batch)]
    n_batches = -(-n_frames // batch)
    model.eval()

    def run(k):
        for _ in range(k):
            raw_maps(model, frames, plans, cfg.score_strategy, cfg.predict_anomaly_map)

    run(warmup_batches)
    rates = []
    for _ in range(repeats):
        start = time.perf_counter()
        run(n_batches)
        rates.append(n_batches * batch / (time.perf_counter() - start))
    return statistics.median(rates)


def bench(
    model: SelfDistilledMAE | None,
    cfg: ExperimentConfig,
    n_frames: int = 200,
    batch: int = 16,
    compare_ffn: bool = False,
) -> BenchReport:
    model = init_model(cfg, cfg.seed) if model is None else model
    fps1 = measure_fps(model, cfg, n_frames, 1)
    fpsn = measure_fps(model, cfg, n_frames, batch)
    fps_mlp = None
    if compare_ffn:
        mlp_cfg = cfg.replace(ffn_type="mlp" if cfg.ffn_type == "pointwise" else "pointwise")
        fps_mlp = measure_fps(init_model(mlp_cfg, cfg.seed), mlp_cfg, n_frames, batch)
    return BenchReport(fps1, fpsn, batch, count_parameters(model), estimate_flops(cfg),
                       environment_note(), fps_mlp)
