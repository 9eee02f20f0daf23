import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sdmae.config import ExperimentConfig, load_config  # noqa: E402
from sdmae.data import load_dataset, load_event_bank  # noqa: E402
from sdmae.toy import ToyParams, generate_toy_dataset  # noqa: E402

SMALL_TOY = ToyParams(train_videos=3, test_videos=2, frames=40, events=4, event_frames=8)


def micro_config(**changes) -> ExperimentConfig:
    """8x8 frames, d=4, width 8, one block per stage."""
    base = dict(frame_height=8, frame_width=8, patch_size=4, channels=1, encoder_dim=8, decoder_dim=8,
                encoder_blocks=1, teacher_decoder_blocks=1, student_decoder_blocks=1, attention_heads=2,
                mask_ratio=0.25, smooth_kernel=(3, 3, 3), gaussian_sigma=1.0)
    base.update(changes)
    return ExperimentConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_toy_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_toy")
    generate_toy_dataset(root, SMALL_TOY, seed=3)
    return root


@pytest.fixture(scope="session")
def toy_cfg():
    return load_config(None, base="toy")


@pytest.fixture(scope="session")
def small_toy(small_toy_dir, toy_cfg):
    train = load_dataset(small_toy_dir, toy_cfg, "train")
    test = load_dataset(small_toy_dir, toy_cfg, "test")
    bank = load_event_bank(small_toy_dir / "bank")
    return train, test, bank


@pytest.fixture(scope="session")
def small_trained(small_toy, toy_cfg):
    """Teacher + student trained briefly on the small toy set."""
    from sdmae.train import distill_student, train_teacher

    train, _, bank = small_toy
    cfg = toy_cfg.replace(teacher_epochs=6, student_epochs=3)
    model, tstate = train_teacher(train, bank, cfg)
    model, sstate = distill_student(train, bank, cfg, model)
    return model, cfg, tstate, sstate


def run_cli(*args, check=True):
    """Run the installed command line in a subprocess."""
    import subprocess

    proc = subprocess.run([sys.executable, "-m", "sdmae", *map(str, args)], capture_output=True, text=True)
    if check and proc.returncode != 0:
        raise AssertionError(f"sdmae {' '.join(map(str, args))} exited {proc.returncode}:\n{proc.stderr}")
    return proc


@pytest.fixture(scope="session")
def toy_pipeline(tmp_path_factory):
    """Full toy run through the command line: data, teacher, student, scores, evaluation."""
    import time

    root = tmp_path_factory.mktemp("toy_pipeline")
    data, run = root / "data", root / "run"
    start = time.perf_counter()
    run_cli("make-toy", "--out", data, "--seed", 0)
    run_cli("train-teacher", "--preset", "toy", "--data", data, "--run", run)
    run_cli("distill", "--preset", "toy", "--data", data, "--run", run)
    run_cli("score", "--data", data, "--run", run)
    run_cli("eval", "--data", data, "--run", run)
    return {"data": data, "run": run, "seconds": time.perf_counter() - start}


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
