"""Command-line entry point.

A run directory collects everything one experiment produces::

    RUN/config.resolved  train_log.csv  distill_log.csv  checkpoints/
        scores/  eval.txt  eval.kv  bench.txt  plots/  ablation.txt
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load_config, save_config
from .data import DataError, load_dataset, load_event_bank, read_labels
from .evaluation import EvaluationError, evaluate, format_report, write_results
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .toy import ToyParams, generate_toy_dataset

log = logging.getLogger("sdmae")

KNOWN_ERRORS = (ConfigError, DataError, EvaluationError, CheckpointError, FileNotFoundError, RuntimeError, ValueError)


def _config(args, run: Path | None = None):
    resolved = run / "config.resolved" if run is not None else None
    path = args.config
    if path is None and resolved is not None and resolved.is_file():
        path = resolved
    return load_config(path, args.set or [], base=args.preset)


def _bank(args, cfg):
    bank_dir = Path(args.bank) if args.bank else Path(args.data) / "bank"
    if bank_dir.is_dir():
        return load_event_bank(bank_dir)
    if cfg.augment_probability > 0:
        raise DataError(f"no event bank at {bank_dir}; pass --bank or set augment_probability=0")
    return []


def cmd_make_toy(args):
    params = ToyParams(size=args.size, train_videos=args.train_videos, test_videos=args.test_videos,
                       frames=args.frames)
    print(generate_toy_dataset(args.out, params, args.seed), end="")


def _epoch_saver(run: Path, every: int, seed: int):
    def on_epoch(stage, epoch, loss, model):
        if every and epoch % every == 0:
            stage_before, model.stage = model.stage, stage
            save_checkpoint(model, run / "checkpoints" / f"{stage}_e{epoch:03d}", seed)
            model.stage = stage_before
    return on_epoch


def cmd_train_teacher(args):
    from .train import train_teacher, write_log

    run = Path(args.run)
    cfg = load_config(args.config, args.set or [], base=args.preset)
    run.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run / "config.resolved")
    videos = load_dataset(args.data, cfg, "train")
    bank = _bank(args, cfg)
    model, state = train_teacher(videos, bank, cfg, on_epoch=_epoch_saver(run, args.checkpoint_every, cfg.seed))
    write_log(run / "train_log.csv", state.loss_history)
    save_checkpoint(model, run / "checkpoints" / "teacher", cfg.seed)
    print(f"teacher trained for {state.epoch} epochs; final mean loss {state.loss_history[-1]:.6g}"
          if state.loss_history else "teacher saved without training (0 epochs)")


def cmd_distill(args):
    from .train import distill_student, write_log

    run = Path(args.run)
    cfg = _config(args, run)
    model = load_checkpoint(run / "checkpoints" / "teacher", cfg)
    videos = load_dataset(args.data, cfg, "train")
    bank = _bank(args, cfg)
    model, state = distill_student(videos, bank, cfg, model,
                                   on_epoch=_epoch_saver(run, args.checkpoint_every, cfg.seed))
    write_log(run / "distill_log.csv", state.loss_history)
    save_checkpoint(model, run / "checkpoints" / "student", cfg.seed)
    if state.loss_history:
        print(f"student distilled for {state.epoch} epochs; final mean loss {state.loss_history[-1]:.6g}")


def _load_model(run: Path, cfg, name: str | None):
    ckpt = run / "checkpoints"
    if name is None:
        name = "student" if (ckpt / "student.manifest").is_file() else "teacher"
    return load_checkpoint(ckpt / name, cfg)


def cmd_score(args):
    from .infer import localize, score_video, write_localization_csv, write_map_images, write_scores_csv

    run = Path(args.run)
    cfg = _config(args, run)
    model = _load_model(run, cfg, args.checkpoint)
    out = Path(args.out) if args.out else run / "scores"
    out.mkdir(parents=True, exist_ok=True)
    for video in load_dataset(args.data, cfg, "test"):
        series, maps = score_video(model, video, cfg)
        write_scores_csv(out / f"{video.video_id}.csv", series)
        if args.maps:
            write_map_images(out / "maps" / video.video_id, maps)
        if args.localize is not None:
            regions = [localize(m, cfg.patch_size, args.localize) for m in maps]
            write_localization_csv(out / f"{video.video_id}_boxes.csv", regions)
        print(f"{video.video_id}: {len(series)} frames scored")


def cmd_eval(args):
    from .infer import read_scores_csv

    run = Path(args.run)
    scores_dir = Path(args.scores) if args.scores else run / "scores"
    labels_dir = Path(args.data) / "test_labels"
    files = sorted(p for p in scores_dir.glob("*.csv") if not p.stem.endswith("_boxes"))
    if not files:
        raise EvaluationError(f"no score files in {scores_dir}")
    pairs = []
    for f in files:
        series = read_scores_csv(f)
        lpath = labels_dir / f"{series.video_id}.txt"
        if not lpath.is_file():
            raise DataError(f"video {series.video_id}: no labels at {lpath}")
        pairs.append((series, read_labels(lpath)))
    result = evaluate(pairs)
    report = format_report(result)
    (run / "eval.txt").write_text(report)
    write_results(run / "eval.kv", result)
    print(report, end="")


def cmd_bench(args):
    from .bench import bench

    run = Path(args.run) if args.run else None
    cfg = _config(args, run)
    model = None
    if run is not None and (run / "checkpoints").is_dir():
        model = _load_model(run, cfg, args.checkpoint)
    report = bench(model, cfg, n_frames=args.frames, batch=args.batch, compare_ffn=args.compare_ffn)
    text = report.format()
    if run is not None:
        run.mkdir(parents=True, exist_ok=True)
        (run / "bench.txt").write_text(text)
    print(text, end="")


def cmd_ablate(args):
    from .ablation import format_ablation, run_ablation

    out = Path(args.out)
    overrides = list(args.set or []) + [f"seed={args.seed}"]
    cfg = load_config(args.config, overrides, base=args.preset)
    train = load_dataset(args.data, cfg, "train")
    test = load_dataset(args.data, cfg, "test")
    bank = _bank(args, cfg.replace(augment_probability=max(cfg.augment_probability, 0.25)))
    text = format_ablation(run_ablation(train, test, bank, cfg), args.seed)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.resolved")
    (out / "ablation.txt").write_text(text)
    print(text, end="")


def cmd_plot(args):
    from .infer import localize, score_video
    from .plots import plot_overlay, plot_scores

    run = Path(args.run)
    cfg = _config(args, run)
    model = _load_model(run, cfg, args.checkpoint)
    out = run / "plots"
    out.mkdir(parents=True, exist_ok=True)
    for video in load_dataset(args.data, cfg, "test"):
        if args.video and video.video_id not in args.video:
            continue
        series, maps = score_video(model, video, cfg)
        plot_scores(series, video.labels, out / f"{video.video_id}_scores.png")
        t = int(np.argmax(series.smoothed))
        threshold = args.threshold if args.threshold is not None else float(np.quantile(maps, 0.99))
        plot_overlay(video.frames[t], maps[t], localize(maps[t], cfg.patch_size, threshold),
                     out / f"{video.video_id}_overlay_{t:06d}.png", f"video {video.video_id}, frame {t}")
        print(f"{video.video_id}: plots written to {out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdmae", description="Self-distilled masked AE for video anomaly detection")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def with_config(p):
        p.add_argument("--preset", default="full", choices=("full", "toy"),
                       help="base defaults before the config file and overrides (default: full)")
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key; repeatable")
        return p

    p = sub.add_parser("make-toy", help="write the deterministic toy dataset and event bank")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--train-videos", type=int, default=8)
    p.add_argument("--test-videos", type=int, default=4)
    p.add_argument("--frames", type=int, default=120)
    p.set_defaults(func=cmd_make_toy)

    for name, func, text in (("train-teacher", cmd_train_teacher, "stage 1: train encoder + teacher decoder"),
                             ("distill", cmd_distill, "stage 2: distill the student decoder")):
        p = with_config(sub.add_parser(name, help=text))
        p.add_argument("--data", required=True, help="dataset root")
        p.add_argument("--bank", help="event bank directory (default: DATA/bank)")
        p.add_argument("--run", required=True, help="run directory")
        p.add_argument("--checkpoint-every", type=int, default=0, metavar="K",
                       help="also checkpoint every K epochs")
        p.set_defaults(func=func)

    p = with_config(sub.add_parser("score", help="score test videos"))
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--checkpoint", choices=("teacher", "student"))
    p.add_argument("--out", help="score directory (default: RUN/scores)")
    p.add_argument("--maps", action="store_true", help="also write per-frame score-map PNGs")
    p.add_argument("--localize", type=float, metavar="THRESHOLD", help="write patch bounding boxes")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="micro/macro AUC of scored videos")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--scores", help="score directory (default: RUN/scores)")
    p.set_defaults(func=cmd_eval)

    p = with_config(sub.add_parser("bench", help="FPS, parameters and FLOPs"))
    p.add_argument("--run", help="run directory; uses its checkpoint and config when present")
    p.add_argument("--checkpoint", choices=("teacher", "student"))
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--compare-ffn", action="store_true", help="also time dense (mlp) blocks")
    p.set_defaults(func=cmd_bench)

    p = with_config(sub.add_parser("ablate", help="component / strategy / proportion ablations"))
    p.add_argument("--data", required=True)
    p.add_argument("--bank")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ablate)

    p = with_config(sub.add_parser("plot", help="score curves and localisation overlays"))
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--checkpoint", choices=("teacher", "student"))
    p.add_argument("--video", action="append", help="only these video ids")
    p.add_argument("--threshold", type=float, help="patch threshold (default: 99th percentile of the maps)")
    p.set_defaults(func=cmd_plot)
    return parser


def run_command(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except KNOWN_ERRORS as exc:
        print(f"sdmae {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
