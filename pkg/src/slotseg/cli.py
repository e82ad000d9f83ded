"""Command-line entry point wiring all stages.

Subcommands: generate, pretrain-background, pretrain-objects, pretrain-seg,
train, eval, render. Exit codes: 0 success, 2 usage error, 1 runtime failure.
Every run echoes its effective configuration into the output directory.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from .config import (
    ConfigError,
    LossWeights,
    ModelConfig,
    Schedule,
    desk_config,
    format_config_text,
    parse_config_text,
    validate_config,
    with_overrides,
)


class UsageError(RuntimeError):
    pass


def load_config(path: str | None) -> tuple[ModelConfig, Schedule, LossWeights]:
    """Read a flat key=value config file; an absent path means all defaults."""
    if path is None:
        cfg = validate_config(desk_config())
        return cfg, Schedule.from_config(cfg), LossWeights()
    file = Path(path)
    if not file.exists():
        raise UsageError(f"config file not found: {file}")
    return parse_config_text(file.read_text())


def _add_shared(parser: argparse.ArgumentParser, need_dataset=True, need_out=True):
    parser.add_argument("--config", type=str, default=None, help="key=value config file")
    if need_dataset:
        parser.add_argument("--dataset", type=str, required=True, help="dataset root")
    if need_out:
        parser.add_argument("--out", type=str, required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--deterministic", action="store_true",
                        help="single-threaded bit-reproducible mode")
    parser.add_argument("--slots", type=int, default=None, help="override num_slots")
    parser.add_argument("--init", choices=("rnd", "reg", "seg"), default=None)
    parser.add_argument("--depth-input", choices=("on", "off"), default=None)
    parser.add_argument("--inner-feedback", choices=("on", "off"), default=None)
    parser.add_argument("--outer-feedback", choices=("on", "off"), default=None)


def _apply_flags(cfg: ModelConfig, args) -> ModelConfig:
    overrides = {}
    if getattr(args, "slots", None) is not None:
        overrides["num_slots"] = args.slots
    if getattr(args, "init", None) is not None:
        overrides["init_strategy"] = args.init
    for flag, field in (
        ("depth_input", "depth_input"),
        ("inner_feedback", "inner_feedback"),
        ("outer_feedback", "outer_feedback"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[field] = value == "on"
    return with_overrides(cfg, **overrides) if overrides else cfg


def _prepare(args, need_dataset=True) -> tuple[ModelConfig, Schedule, LossWeights, Path]:
    cfg, schedule, weights = load_config(getattr(args, "config", None))
    cfg = _apply_flags(cfg, args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.txt").write_text(format_config_text(cfg, weights))
    if args.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(args.seed)
    if need_dataset and not Path(args.dataset).exists():
        raise UsageError(f"dataset root not found: {args.dataset}")
    return cfg, Schedule.from_config(cfg), weights, out


def cmd_generate(args) -> int:
    from .datagen import generate_dataset

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = generate_dataset(
        out,
        seed=args.seed,
        h=args.size,
        w=args.size,
        num_frames=args.frames,
        counts={"train": args.train_count, "val": args.val_count},
        num_objects=(args.objects_min, args.objects_max),
        pan=args.pan,
    )
    print(f"wrote dataset to {out} (mu={manifest.mu:.4f}, sigma={manifest.sigma:.4f})")
    return 0


def cmd_pretrain_background(args) -> int:
    from .pipeline import pretrain_background, save_bundle

    cfg, _, _, out = _prepare(args)
    background = pretrain_background(
        args.dataset, cfg, steps=args.steps, seed=args.seed,
        log_path=out / "train.log",
    )
    path = save_bundle(out / "background.ckpt", cfg, background=background)
    print(f"saved {path}")
    return 0


def cmd_pretrain_objects(args) -> int:
    from .pipeline import load_bundle, pretrain_objects, save_bundle

    cfg, _, _, out = _prepare(args)
    _, background, _, _ = load_bundle(args.background, cfg, force=args.force)
    if background is None:
        raise UsageError(f"{args.background} holds no background module")
    model = pretrain_objects(
        args.dataset, cfg, background, steps=args.steps, seed=args.seed,
        log_path=out / "train.log",
    )
    path = save_bundle(out / "objects.ckpt", cfg, model=model, background=background)
    print(f"saved {path}")
    return 0


def cmd_pretrain_seg(args) -> int:
    from .pipeline import pretrain_segnet, save_bundle

    cfg, _, _, out = _prepare(args)
    segnet = pretrain_segnet(
        args.dataset, cfg, steps=args.steps, seed=args.seed, log_path=out / "train.log"
    )
    path = save_bundle(out / "segnet.ckpt", cfg, segnet=segnet)
    print(f"saved {path}")
    return 0


def _load_segnet_if_needed(cfg, args):
    from .pipeline import load_bundle

    if cfg.init_strategy != "seg":
        return None
    seg_path = getattr(args, "seg", None)
    if seg_path is None:
        raise UsageError(
            "--init seg requires --seg SEGNET_CHECKPOINT (missing artifact: "
            "segmentation checkpoint)"
        )
    _, _, segnet, _ = load_bundle(seg_path, cfg, force=args.force)
    if segnet is None:
        raise UsageError(f"{seg_path} holds no segmentation net")
    return segnet


def cmd_train(args) -> int:
    from .pipeline import load_bundle, save_bundle, train_full

    cfg, schedule, weights, out = _prepare(args)
    model_in, background, _, _ = load_bundle(args.background, cfg, force=args.force)
    if background is None:
        raise UsageError(f"{args.background} holds no background module")
    if args.model is not None:
        model_in, bg2, _, _ = load_bundle(args.model, cfg, force=args.force)
        if model_in is None:
            raise UsageError(f"{args.model} holds no scene model")
    if model_in is None:
        from .pipeline import SceneModel

        model_in = SceneModel(cfg)
    segnet = _load_segnet_if_needed(cfg, args)
    model, val_losses = train_full(
        args.dataset, cfg, model_in, background, segnet, weights,
        epochs=args.epochs, seed=args.seed, out_dir=out, log_path=out / "train.log",
    )
    path = save_bundle(
        out / "model.ckpt", cfg, model=model, background=background, segnet=segnet,
        val_loss=min(val_losses) if val_losses else float("inf"),
    )
    print(f"saved {path}")
    return 0


def cmd_eval(args) -> int:
    from .datagen import read_dataset, read_manifest
    from .metrics import aggregate_reports, evaluate_sequence, format_report, format_table
    from .pipeline import infer_sequence, load_bundle, record_frames

    cfg, schedule, weights, out = _prepare(args)
    model, background, segnet, _ = load_bundle(args.model, cfg, force=args.force)
    if model is None or background is None:
        raise UsageError(f"{args.model} must hold both a scene model and a background module")
    if cfg.init_strategy == "seg" and segnet is None:
        segnet = _load_segnet_if_needed(cfg, args)
    manifest = read_manifest(args.dataset)
    seq_ids, per_seq = [], []
    for rec in read_dataset(args.dataset, args.split):
        frames = record_frames(rec, manifest)
        result = infer_sequence(
            model, background, segnet, frames, cfg, schedule,
            seed=args.seed, num_slots=args.slots,
        )
        per_seq.append(evaluate_sequence(result.labels, rec.labels))
        seq_ids.append(rec.seq_id)
    summary = aggregate_reports(per_seq)
    (out / "metrics_report.txt").write_text(format_report(summary))
    (out / "metrics_table.csv").write_text(format_table(seq_ids, per_seq))
    print(format_report(summary), end="")
    return 0


def cmd_render(args) -> int:
    from .datagen import read_dataset, read_manifest
    from .pipeline import infer_sequence, load_bundle, record_frames
    from .render import render_sequence_panels

    cfg, schedule, _, out = _prepare(args)
    model, background, segnet, _ = load_bundle(args.model, cfg, force=args.force)
    if model is None or background is None:
        raise UsageError(f"{args.model} must hold both a scene model and a background module")
    manifest = read_manifest(args.dataset)
    for rec in read_dataset(args.dataset, args.split):
        if args.sequence is not None and rec.seq_id != args.sequence:
            continue
        frames = record_frames(rec, manifest)
        result = infer_sequence(
            model, background, segnet, frames, cfg, schedule,
            seed=args.seed, num_slots=args.slots,
        )
        paths = render_sequence_panels(result, frames, Path(out) / rec.seq_id)
        print(f"wrote {len(paths)} panels for {rec.seq_id}")
        if args.sequence is None:
            break  # default: first sequence only
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slotseg",
        description="slot-based scene segmentation: data, pretraining, training, eval",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--frames", type=int, default=12)
    p.add_argument("--train-count", type=int, default=8)
    p.add_argument("--val-count", type=int, default=2)
    p.add_argument("--objects-min", type=int, default=2)
    p.add_argument("--objects-max", type=int, default=4)
    p.add_argument("--pan", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain-background", help="train the background pair")
    _add_shared(p)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_pretrain_background)

    p = sub.add_parser("pretrain-objects", help="single-slot encoder/decoder pretraining")
    _add_shared(p)
    p.add_argument("--background", type=str, required=True)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_pretrain_objects)

    p = sub.add_parser("pretrain-seg", help="train the instance proposal net")
    _add_shared(p)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_pretrain_seg)

    p = sub.add_parser("train", help="full staged training")
    _add_shared(p)
    p.add_argument("--background", type=str, required=True)
    p.add_argument("--model", type=str, default=None, help="pretrained encoder/decoder bundle")
    p.add_argument("--seg", type=str, default=None, help="segmentation checkpoint for --init seg")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run inference and write metric reports")
    _add_shared(p)
    p.add_argument("--model", type=str, required=True)
    p.add_argument("--seg", type=str, default=None)
    p.add_argument("--split", type=str, default="val")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="write per-frame decomposition panels")
    _add_shared(p)
    p.add_argument("--model", type=str, required=True)
    p.add_argument("--split", type=str, default="val")
    p.add_argument("--sequence", type=str, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_render)
    return parser


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    from .pipeline import CheckpointError

    try:
        return args.func(args)
    except (UsageError, ConfigError, CheckpointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # runtime failure
        print(f"runtime error: {err}", file=sys.stderr)
        return 1


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
