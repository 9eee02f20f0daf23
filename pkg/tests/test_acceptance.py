"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The lines are collected in ``RESULTS`` and printed in the terminal summary.
"""

import filecmp
import time
from contextlib import contextmanager

import numpy as np

import oracles
from conftest import run_cli
from gradcheck import gradient_check
from sdmae.config import load_config, preset
from sdmae.data import load_dataset
from sdmae.evaluation import evaluate, read_results, roc_auc
from sdmae.infer import anomaly_map, score_video, smooth_volume, temporal_gaussian
from sdmae.model import count_parameters, estimate_flops, init_model, load_checkpoint, parameter_digest
from sdmae.motion import fuse_anomaly, motion_gradient, patch_motion_stats, token_weights
from sdmae.train import distill_student, student_loss, teacher_loss, train_teacher

RESULTS: list[str] = []


@contextmanager
def criterion(number: int, title: str):
    """Record PASS/FAIL with a detail string the body fills in."""
    detail = {"text": ""}
    start = time.perf_counter()
    try:
        yield detail
    except BaseException as exc:
        line = f"criterion {number} [{title}]: FAIL ({time.perf_counter() - start:.1f}s) {detail['text']} {exc!r}"
        RESULTS.append(line)
        print(line)
        raise
    line = f"criterion {number} [{title}]: PASS ({time.perf_counter() - start:.1f}s) {detail['text']}"
    RESULTS.append(line)
    print(line)


N_INSTANCES = 100


def test_criterion_1_equation_oracles():
    rng = np.random.default_rng(101)
    with criterion(1, "equation oracles") as rec:
        start = time.perf_counter()
        worst = {}

        def note(name, err):
            worst[name] = max(worst.get(name, 0.0), float(err))

        for _ in range(N_INSTANCES):
            h, w, c, d = 8, 8, int(rng.integers(1, 4)), 4
            prev, cur = rng.random((h, w, c)), rng.random((h, w, c))
            grad = motion_gradient(prev, cur)
            direct = np.abs(oracles.median3_bruteforce(cur) - oracles.median3_bruteforce(prev))
            note("motion gradient", np.abs(grad - direct).max())

            m = patch_motion_stats(grad, d)
            note("patch stats", np.abs(m - oracles.patch_stats_bruteforce(grad, d)).max())
            note("token weights", np.abs(token_weights(m) - oracles.weights_bruteforce(list(m))).max())

            n = int(rng.integers(1, 10))
            a, b = rng.random((n, 2, 2, 2)), rng.random((n, 2, 2, 2))
            wts = token_weights(rng.random(n))
            ref = oracles.weighted_loss_bruteforce(a, b, wts)
            note("teacher loss", abs(teacher_loss(a, b, wts).item() - ref))
            note("student loss", abs(student_loss(a, b, wts).item() - ref))

            x, xt, xs = rng.random((3, 4, 4, c))
            for strategy in ("T", "T_S", "T_TSD", "T_S_TSD"):
                note("anomaly map", np.abs(anomaly_map(x, xt, xs, strategy)
                                           - oracles.anomaly_map_bruteforce(x, xt, xs, strategy)).max())

            vol = rng.random((int(rng.integers(1, 5)), 4, 5))
            kernel = tuple(int(k) for k in rng.choice([1, 3, 5], size=3))
            note("3-D mean filter", np.abs(smooth_volume(vol, kernel)
                                           - oracles.mean_filter3d_bruteforce(vol, kernel)).max())

            raw = rng.random(int(rng.integers(1, 60)))
            sigma = float(rng.uniform(0.2, 4.0))
            note("temporal gaussian", np.abs(temporal_gaussian(raw, sigma)
                                             - oracles.gaussian_smooth_bruteforce(raw, sigma)).max())

            k = int(rng.integers(2, 300))
            labels = rng.integers(0, 2, k)
            labels[:2] = (0, 1)
            scores = np.round(rng.random(k), int(rng.integers(1, 4)))
            note("roc auc", abs(roc_auc(scores, labels) - oracles.auc_pairwise(scores, labels)))

        elapsed = time.perf_counter() - start
        rec["text"] = f"{N_INSTANCES} instances each; worst errors " + ", ".join(
            f"{k} {v:.1e}" for k, v in worst.items())
        for name, err in worst.items():
            assert err <= (1e-12 if name == "roc auc" else 1e-9), name
        assert elapsed < 60


def test_criterion_2_gradient_check():
    with criterion(2, "gradient check") as rec:
        start = time.perf_counter()
        parts = []
        for loss in ("teacher", "student"):
            rel, _ = gradient_check(loss, n_params=120, seed=2)
            parts.append(f"{loss}: {len(rel)} params, max rel err {rel.max():.2e}")
            assert len(rel) >= 100
            assert rel.max() <= 1e-3, loss
        rec["text"] = "; ".join(parts)
        assert time.perf_counter() - start < 120


def test_criterion_3_freeze_contract(small_toy, toy_cfg):
    train, _, bank = small_toy
    with criterion(3, "freeze contract") as rec:
        cfg = toy_cfg.replace(teacher_epochs=1, student_epochs=2)
        model, _ = train_teacher(train, bank, cfg)
        before = parameter_digest([model.encoder, model.teacher_decoder])
        model, _ = distill_student(train, bank, cfg, model)
        after = parameter_digest([model.encoder, model.teacher_decoder])
        rec["text"] = f"backbone digest {before[:12]} -> {after[:12]}"
        assert before == after


def test_criterion_4_weight_properties():
    rng = np.random.default_rng(404)
    with criterion(4, "weight properties") as rec:
        worst_sum, worst_scale, min_dom = 0.0, 0.0, np.inf
        for _ in range(N_INSTANCES):
            m = rng.random(int(rng.integers(1, 200))) * 10 ** rng.uniform(-6, 6)
            if rng.random() < 0.1:
                m[:] = 0.0
            w = token_weights(m)
            worst_sum = max(worst_sum, abs(w.sum() - 1.0))
            for k in (1e-3, 1.0, 1e3):
                worst_scale = max(worst_scale, np.abs(token_weights(k * m) - w).max())
            grad = rng.random((16, 16, 3))
            amap = np.zeros((16, 16))
            r, c = rng.integers(0, 4, size=2) * 4
            amap[r:r + 4, c:c + 4] = 1.0
            fused = patch_motion_stats(fuse_anomaly(grad, amap), 4)
            min_dom = min(min_dom, fused[(r // 4) * 4 + c // 4])
        rec["text"] = f"max |sum-1| {worst_sum:.1e}, max scale diff {worst_scale:.1e}, min covered m {min_dom:.3f}"
        assert worst_sum <= 1e-6
        assert worst_scale <= 1e-9
        assert min_dom >= 1.0


def _baseline_micro_auc(data, cfg):
    model = init_model(cfg, cfg.seed)
    pairs = [(score_video(model, v, cfg, allow_untrained=True)[0], v.labels) for v in load_dataset(data, cfg, "test")]
    return evaluate(pairs).micro_auc


def test_criterion_5_toy_end_to_end(toy_pipeline):
    with criterion(5, "toy end-to-end") as rec:
        run, data = toy_pipeline["run"], toy_pipeline["data"]
        micro = float(read_results(run / "eval.kv")["micro_auc"])
        cfg = load_config(run / "config.resolved", environ={})
        baseline = _baseline_micro_auc(data, cfg)
        minutes = toy_pipeline["seconds"] / 60
        rec["text"] = (f"micro AUC {micro:.4f}, untrained baseline {baseline:.4f}, "
                       f"margin {micro - baseline:.4f}, pipeline {minutes:.1f} min")
        assert (cfg.teacher_epochs, cfg.student_epochs) == (10, 4)
        assert minutes <= 15
        assert micro >= 0.80
        assert micro >= baseline + 0.30


def test_criterion_6_strategy_direction(toy_pipeline):
    with criterion(6, "strategy ablation direction") as rec:
        run, data = toy_pipeline["run"], toy_pipeline["data"]
        cfg = load_config(run / "config.resolved", environ={})
        model = load_checkpoint(run / "checkpoints" / "student", cfg)
        videos = load_dataset(data, cfg, "test")
        auc = {}
        for strategy in ("T", "T_TSD"):
            c = cfg.replace(score_strategy=strategy)
            auc[strategy] = evaluate([(score_video(model, v, c)[0], v.labels) for v in videos]).micro_auc
        rec["text"] = f"micro AUC T_TSD {auc['T_TSD']:.4f} vs T {auc['T']:.4f}"
        assert auc["T_TSD"] >= auc["T"] - 0.02


def test_criterion_7_accounting():
    with criterion(7, "accounting") as rec:
        cfg = preset("full")
        params = count_parameters(init_model(cfg))
        gflops = estimate_flops(cfg) / 1e9
        rec["text"] = f"params {params / 1e6:.3f}M (reference 3M), {gflops:.3f} GFLOPs (reference 0.8)"
        assert 1.5e6 <= params <= 6e6
        assert 0.8 / 3 <= gflops <= 0.8 * 3


def _tree(root):
    return sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file())


def _same_files(a, b, rels):
    return all(filecmp.cmp(a / r, b / r, shallow=False) for r in rels)


def test_criterion_8_determinism(tmp_path):
    with criterion(8, "determinism") as rec:
        roots = []
        for name in ("first", "second"):
            root = tmp_path / name
            data, run = root / "data", root / "run"
            run_cli("make-toy", "--out", data, "--seed", 11, "--train-videos", 3, "--test-videos", 2,
                    "--frames", 40)
            fast = ["--preset", "toy", "--set", "teacher_epochs=2", "--set", "student_epochs=1"]
            run_cli("train-teacher", *fast, "--data", data, "--run", run)
            run_cli("distill", *fast, "--data", data, "--run", run)
            run_cli("score", "--data", data, "--run", run)
            roots.append(root)
        a, b = roots
        data_files = _tree(a / "data")
        score_files = [p for p in _tree(a / "run") if p.parts[0] == "scores"]
        logs = [p for p in _tree(a / "run") if p.suffix == ".csv" and p.parts[0] != "scores"]
        checks = {
            "toy files": _tree(b / "data") == data_files and _same_files(a / "data", b / "data", data_files),
            "loss histories": len(logs) == 2 and _same_files(a / "run", b / "run", logs),
            "score csvs": len(score_files) == 2 and _same_files(a / "run", b / "run", score_files),
        }
        rec["text"] = ", ".join(f"{k} {'identical' if v else 'DIFFER'}" for k, v in checks.items())
        assert all(checks.values())
