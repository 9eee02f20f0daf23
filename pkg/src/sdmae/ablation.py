"""Component, score-strategy and augmentation-proportion ablations."""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .config import ExperimentConfig, STRATEGIES
from .evaluation import EvalResult, evaluate
from .infer import score_video
from .train import distill_student, train_teacher

log = logging.getLogger(__name__)

PROPORTIONS = (0.0, 0.25, 0.5, 0.75)

# (label, motion weights, self-distillation, synthetic data, anomaly maps)
COMPONENT_ROWS = (
    ("vanilla", False, False, False, False),
    ("+motion weights", True, False, False, False),
    ("+self-distillation", True, True, False, False),
    ("+synthetic data", True, True, True, False),
    ("+anomaly maps", True, True, True, True),
)


@dataclass
class AblationRow:
    table: str
    label: str
    result: EvalResult


class _Runner:
    """Trains each distinct configuration once."""

    def __init__(self, train, test, bank):
        self.train, self.test, self.bank = train, test, bank
        self._models = {}

    def model(self, cfg: ExperimentConfig):
        key = cfg.replace(score_strategy="T")
        if key not in self._models:
            log.info("ablation: training %s", key)
            model, _ = train_teacher(self.train, self.bank, cfg)
            model, _ = distill_student(self.train, self.bank, cfg, model)
            self._models[key] = model
        return self._models[key]

    def evaluate(self, cfg: ExperimentConfig) -> EvalResult:
        model = self.model(cfg)
        return evaluate([(score_video(model, v, cfg)[0], v.labels) for v in self.test])


def run_ablation(train, test, bank, cfg: ExperimentConfig) -> list[AblationRow]:
    runner = _Runner(train, test, bank)
    rows = []
    p_full = cfg.augment_probability if cfg.augment_probability > 0 else 0.25
    for label, motion_w, distill, synthetic, maps in COMPONENT_ROWS:
        c = cfg.replace(
            motion_weighting=motion_w,
            score_strategy="T_TSD" if distill else "T",
            augment_probability=p_full if synthetic else 0.0,
            predict_anomaly_map=maps,
        )
        rows.append(AblationRow("components", label, runner.evaluate(c)))
    full = cfg.replace(augment_probability=p_full)
    for strategy in STRATEGIES:
        rows.append(AblationRow("strategies", strategy, runner.evaluate(full.replace(score_strategy=strategy))))
    for p in PROPORTIONS:
        rows.append(AblationRow("proportions", f"{round(100 * p)}%",
                                runner.evaluate(full.replace(augment_probability=p))))
    return rows


def format_ablation(rows: list[AblationRow], seed: int) -> str:
    titles = {
        "components": "component ablation",
        "strategies": "score strategy",
        "proportions": "synthetic-anomaly proportion",
    }
    out = [f"seed = {seed}"]
    for table, title in titles.items():
        out += ["", f"[{title}]", f"{'row':<22}{'micro':>8}{'macro':>8}"]
        for r in rows:
            if r.table == table:
                out.append(f"{r.label:<22}{100 * r.result.micro_auc:>8.2f}{100 * r.result.macro_auc:>8.2f}")
    return "\n".join(out) + "\n"
