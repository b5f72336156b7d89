"""Command-line entry point.

Subcommands: ``superpixel`` (label map + boundary overlay + column-sum
diagnostic), ``train`` (checkpoint + loss CSV + run manifest), ``eval``
(per-sample and summary metric CSV/JSON), ``infer`` (probability map,
binarized mask, overlay). Exit codes: 0 success, 1 I/O or runtime failure,
2 usage or configuration error. Run directories are append-only: an
existing --out is an error, never overwritten.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import backbone as bb
from . import training as tr
from .checkpoint import (
    CheckpointError,
    IncompatibleCheckpointError,
    apply_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from .config import ConfigError, load_run_config, save_run_config
from .data import load_dataset
from .images import (
    BinaryMask,
    CorruptImageError,
    UnsupportedFormatError,
    load_image,
    save_overlay,
    save_pgm16,
    save_png,
)
from .superpixel import InvalidCountError, hard_assign, iterate
from .images import build_xylab

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

_METRIC_COLUMNS = ("dice", "miou", "mae", "accuracy", "s_measure", "e_measure")


def _new_run_dir(path: str) -> Path:
    out = Path(path)
    if out.exists():
        raise FileExistsError(f"{out}: run directory already exists (runs are append-only)")
    out.mkdir(parents=True)
    return out


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_superpixel(args) -> int:
    if args.m < 1:
        raise ConfigError(f"--m must be >= 1, got {args.m}")
    if args.iters < 1:
        raise ConfigError(f"--iters must be >= 1, got {args.iters}")
    if args.temp <= 0:
        raise ConfigError(f"--temp must be positive, got {args.temp}")
    img = load_image(args.image)
    feats = build_xylab(img, args.pos_scale)
    assoc, centers = iterate(feats, args.m, iters=args.iters, temp=args.temp)
    labels = hard_assign(feats, centers).labels.reshape(img.height, img.width)
    out = _new_run_dir(args.out)
    save_pgm16(labels, out / "labels.pgm")
    save_overlay(img, labels, out / "overlay.png")
    col_err = float(np.abs(assoc.Qhat.data.sum(axis=0) - 1.0).max())
    _write_json(out / "diagnostics.json", {
        "superpixels": args.m,
        "iterations": args.iters,
        "temperature": args.temp,
        "max_column_sum_error": col_err,
        "labels_used": int(np.unique(labels).size),
    })
    print(f"wrote {out}/labels.pgm, overlay.png, diagnostics.json "
          f"(max column-sum error {col_err:.3e})")
    return EXIT_OK


def cmd_train(args) -> int:
    bcfg, tcfg = load_run_config(args.config)
    if args.seed is not None:
        bcfg.seed = args.seed
        tcfg.seed = args.seed
    samples = load_dataset(args.data)
    out = _new_run_dir(args.out)
    t0 = time.perf_counter()
    model = bb.build_model(bcfg, tcfg.ablation_variant)
    result = tr.train(model, samples, tcfg, log=print)
    train_seconds = time.perf_counter() - t0

    ckpt_path = out / "checkpoint.bin"
    save_checkpoint(model.params, ckpt_path)
    loss_path = out / "loss.csv"
    with open(loss_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for i, loss in enumerate(result.losses, start=1):
            writer.writerow([i, repr(loss)])
    save_run_config(bcfg, tcfg, out / "config.json")
    _write_json(out / "manifest.json", {
        "config": json.loads((out / "config.json").read_text()),
        "seed": tcfg.seed,
        "checkpoint": str(ckpt_path),
        "loss_csv": str(loss_path),
        "samples": len(samples),
        "steps": result.steps,
        "tunable_params": bb.count_params(model.params, result.tunable_names),
        "train_seconds": train_seconds,
    })
    print(f"trained {result.epochs} epochs ({result.steps} steps) -> {ckpt_path}")
    return EXIT_OK


def _load_model(checkpoint_path: str, config_path: str | None):
    ckpt = Path(checkpoint_path)
    cfg_path = Path(config_path) if config_path else ckpt.parent / "config.json"
    if not cfg_path.exists():
        raise ConfigError(f"{cfg_path}: config not found next to checkpoint; pass --config")
    bcfg, tcfg = load_run_config(cfg_path)
    model = bb.build_model(bcfg, tcfg.ablation_variant)
    apply_checkpoint(model, load_checkpoint(ckpt))
    return model


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint, args.config)
    samples = load_dataset(args.data)
    out = _new_run_dir(args.out)
    reports = tr.evaluate_dataset(model, samples)
    summary = tr.summarize(reports)
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", *_METRIC_COLUMNS])
        for s, r in zip(samples, reports):
            writer.writerow([s.name] + [repr(getattr(r, c)) for c in _METRIC_COLUMNS])
        writer.writerow(["summary"] + [repr(getattr(summary, c)) for c in _METRIC_COLUMNS])
    _write_json(out / "metrics.json", {
        "summary": summary.as_dict(),
        "samples": {s.name: r.as_dict() for s, r in zip(samples, reports)},
    })
    print(f"evaluated {len(samples)} samples: dice {summary.dice:.4f} "
          f"miou {summary.miou:.4f} mae {summary.mae:.4f}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model = _load_model(args.checkpoint, args.config)
    img = load_image(args.image)
    out = _new_run_dir(args.out)
    prob = tr.predict_map(model, img)
    hard = (prob >= 0.5).astype(np.uint8)
    save_png(np.round(prob * 255.0).astype(np.uint8), out / "probability.png")
    save_png(hard * 255, out / "mask.png")
    save_overlay(img, BinaryMask(img.height, img.width, hard), out / "overlay.png")
    print(f"wrote {out}/probability.png, mask.png, overlay.png "
          f"(foreground fraction {hard.mean():.4f})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and error mapping
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptpix",
        description="Prompt-tuned binary segmentation with a frozen toy backbone.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("superpixel", help="cluster one image and write label artifacts")
    p.add_argument("--image", required=True)
    p.add_argument("--m", type=int, default=16, help="number of superpixels")
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--temp", type=float, default=1.0)
    p.add_argument("--pos-scale", type=float, default=1.0, dest="pos_scale")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_superpixel)

    p = sub.add_parser("train", help="train prompts + decoder on a dataset")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--data", required=True, help="dataset root (images/, masks/)")
    p.add_argument("--out", required=True, help="new run directory")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint over a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None, help="defaults to config.json beside checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="segment one image with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, IncompatibleCheckpointError, InvalidCountError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, FileExistsError, UnsupportedFormatError,
            CorruptImageError, CheckpointError, OSError, ValueError,
            ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
