"""Frame-level ROC-AUC: micro (concatenated) and macro (per-video mean)."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


class EvaluationError(ValueError):
    pass


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise EvaluationError(f"{scores.size} scores but {labels.size} labels")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("AUC is undefined when only one class is present")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class EvalResult:
    micro_auc: float
    macro_auc: float
    per_video_auc: dict[str, float] = field(default_factory=dict)
    counted: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)


def evaluate(series_and_labels: Sequence[tuple]) -> EvalResult:
    """``series_and_labels`` holds (ScoreSeries, labels) pairs; smoothed scores are used."""
    if not series_and_labels:
        raise EvaluationError("no videos to evaluate")
    all_scores, all_labels = [], []
    per_video, counted, skipped = {}, [], []
    for series, labels in series_and_labels:
        labels = np.asarray(labels)
        if len(labels) != len(series.smoothed):
            raise EvaluationError(
                f"video {series.video_id}: {len(labels)} labels for {len(series.smoothed)} frames"
            )
        all_scores.append(series.smoothed)
        all_labels.append(labels)
        if labels.min() == labels.max():
            skipped.append(series.video_id)
            continue
        per_video[series.video_id] = roc_auc(series.smoothed, labels)
        counted.append(series.video_id)
    micro = roc_auc(np.concatenate(all_scores), np.concatenate(all_labels))
    macro = float(np.mean(list(per_video.values()))) if per_video else float("nan")
    return EvalResult(micro, macro, per_video, counted, skipped)


def format_report(result: EvalResult) -> str:
    lines = [
        f"micro AUC: {100 * result.micro_auc:.2f}%",
        f"macro AUC: {100 * result.macro_auc:.2f}% over {len(result.counted)} videos",
    ]
    for vid, auc in result.per_video_auc.items():
        lines.append(f"  {vid}: {100 * auc:.2f}%")
    if result.skipped:
        lines.append(f"skipped in macro (single class): {', '.join(result.skipped)}")
    return "\n".join(lines) + "\n"


def write_results(path, result: EvalResult) -> None:
    """Machine-readable ``key = value`` lines."""
    lines = [f"micro_auc = {result.micro_auc!r}", f"macro_auc = {result.macro_auc!r}"]
    lines += [f"video.{vid} = {auc!r}" for vid, auc in result.per_video_auc.items()]
    lines.append(f"skipped = {','.join(result.skipped)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_results(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out
