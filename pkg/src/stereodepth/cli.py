"""Command-line entry point: generate, train, infer, eval, gradcheck.

Exit codes: 0 success, 1 a check or run failed, 2 bad usage or configuration.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .data.io import FormatError, ManifestError, read_ppm, write_pfm, write_ppm
from .data.synthetic import SceneConfig, generate_dataset
from .loss import LossWeights
from .model import CheckpointError, NetConfig, load_checkpoint, save_checkpoint

log = logging.getLogger("stereodepth")

THREADS_ENV = "STEREODEPTH_THREADS"


class UsageError(Exception):
    """Bad flags or configuration; reported with exit code 2."""


# ------------------------------------------------------------------ config

def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 64x32, got {text!r}") from None
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError("size must be positive")
    return w, h


def _parse_crop(text: str) -> tuple[int, int, int, int]:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        vals = ()
    if len(vals) != 4:
        raise argparse.ArgumentTypeError(f"crop must be x,y,w,h, got {text!r}")
    return vals


def default_run_config() -> dict:
    from .train import TrainConfig

    return {
        "net": NetConfig(seed=1).to_dict(),
        "loss": asdict(LossWeights()),
        "train": TrainConfig().to_dict(),
    }


def resolve_run_config(path: str | None, overrides: dict) -> dict:
    """Defaults, then the JSON file's sections, then command-line overrides."""
    cfg = default_run_config()
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        unknown = set(user) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config sections: {sorted(unknown)}")
        for section, values in user.items():
            if not isinstance(values, dict):
                raise UsageError(f"config section {section!r} must be an object")
            bad = set(values) - set(cfg[section])
            if bad:
                raise UsageError(f"unknown keys in {section!r}: {sorted(bad)}")
            cfg[section].update(values)
    for (section, key), value in overrides.items():
        if value is not None:
            cfg[section][key] = value
    return cfg


def build_objects(cfg: dict):
    from .train import TrainConfig

    try:
        net = NetConfig.from_dict(cfg["net"])
        weights = LossWeights(**cfg["loss"])
        train_cfg = TrainConfig(**cfg["train"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return net, weights, train_cfg


@contextmanager
def thread_limit(threads: int | None):
    """Cap BLAS/OpenMP worker threads for the duration of a command."""
    if threads is None and os.environ.get(THREADS_ENV):
        try:
            threads = int(os.environ[THREADS_ENV])
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer") from None
    if threads is None:
        yield
        return
    if threads < 1:
        raise UsageError("--threads must be at least 1")
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=threads):
        yield


# ------------------------------------------------------------------ commands

def cmd_generate(args) -> int:
    width, height = args.size
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene_cfg = SceneConfig()
    lines = []
    for i, (spec, sample) in enumerate(generate_dataset(args.seed, args.count, height, width, scene_cfg)):
        stem = f"{i:05d}"
        write_ppm(out / f"{stem}_left.ppm", sample.left)
        write_ppm(out / f"{stem}_right.ppm", sample.right)
        write_pfm(out / f"{stem}_disp.pfm", sample.gt_disparity_left)
        write_pfm(out / f"{stem}_mask.pfm", sample.valid_mask.astype(np.float32))
        entry = {
            "left": f"{stem}_left.ppm",
            "right": f"{stem}_right.ppm",
            "gt_disparity": f"{stem}_disp.pfm",
            "valid_mask": f"{stem}_mask.pfm",
            "baseline": sample.camera.baseline,
            "focal": sample.camera.focal,
        }
        lines.append(json.dumps(entry, sort_keys=True))
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    meta = {"seed": args.seed, "count": args.count, "width": width, "height": height, "scene": asdict(scene_cfg)}
    (out / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"wrote {args.count} pairs to {out / 'manifest.jsonl'}")
    return 0


def cmd_train(args) -> int:
    from .train import load_samples, train, write_loss_log

    overrides = {
        ("train", "steps"): args.steps,
        ("train", "batch_size"): args.batch_size,
        ("train", "learning_rate"): args.lr,
        ("train", "seed"): args.seed,
        ("net", "seed"): args.seed,
    }
    cfg = resolve_run_config(args.config, overrides)
    net, weights, train_cfg = build_objects(cfg)
    cfg["data"] = str(args.data)
    samples = load_samples(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    result = train(samples, net, weights, train_cfg)
    save_checkpoint(out / "checkpoint.bin", net, result.params)
    write_loss_log(out / "loss.csv", result.log, net.num_scales)
    print(f"final loss {result.log[-1]['c_total']:.6f}; checkpoint {out / 'checkpoint.bin'}")
    return 0


def visualize(disparity: np.ndarray) -> np.ndarray:
    """Grey image ``(d - min) / (max - min)``; a constant map becomes mid grey."""
    lo, hi = float(disparity.min()), float(disparity.max())
    norm = np.full(disparity.shape, 0.5) if hi <= lo else (disparity - lo) / (hi - lo)
    return np.repeat(norm[None], 3, axis=0)


def cmd_infer(args) -> int:
    from .evaluate import predict_disparity

    net, params = load_checkpoint(args.checkpoint)
    left = read_ppm(args.image)
    right = None
    if net.input_mode == "stereo":
        if args.stereo is None:
            raise UsageError("this checkpoint needs --stereo RIGHT_IMAGE")
        right = read_ppm(args.stereo)
    elif args.stereo is not None:
        raise UsageError("--stereo given but the checkpoint is monocular")
    disp = predict_disparity(net, params, left, right, pp=args.pp)
    write_pfm(args.out, disp)
    if args.vis:
        write_ppm(args.vis, visualize(disp))
    print(f"disparity range [{disp.min():.3f}, {disp.max():.3f}] px -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .evaluate import evaluate, write_metrics_csv, write_summary_json

    if args.cap <= 0:
        raise UsageError("--cap must be positive")
    result = evaluate(args.checkpoint, args.data, cap=args.cap, crop=args.crop, pp=args.pp)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", result.rows)
    options = {"checkpoint": str(args.checkpoint), "data": str(args.data), "cap": args.cap, "crop": args.crop, "pp": args.pp}
    write_summary_json(out / "metrics.json", result.summary, {"options": options, "images": len(result.rows)})
    if args.save_predictions:
        pred_dir = out / "pred"
        pred_dir.mkdir(exist_ok=True)
        for image_id, disp in result.predictions.items():
            write_pfm(pred_dir / f"{image_id}.pfm", disp)
    print(result.summary.table())
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import format_table, run_suite

    results = run_suite(args.module, instances=args.instances, seed=args.seed)
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stereodepth", description="Unsupervised stereo-trained depth estimation.")
    p.add_argument("--threads", type=int, default=None, help=f"cap worker threads (fallback: ${THREADS_ENV})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic stereo dataset")
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--count", type=int, default=200)
    g.add_argument("--size", type=_parse_size, default=(64, 32), help="WIDTHxHEIGHT")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on a manifest")
    t.add_argument("--config", help="JSON with optional sections net, loss, train")
    t.add_argument("--data", required=True, help="manifest (JSON lines)")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="predict a disparity map")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True, help="left image (PPM)")
    i.add_argument("--stereo", metavar="RIGHT", help="right image for stereo checkpoints")
    i.add_argument("--pp", action="store_true", help="flip post-processing")
    i.add_argument("--out", required=True, help="output PFM")
    i.add_argument("--vis", help="optional min-max normalised PPM visualisation")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--pp", action="store_true")
    e.add_argument("--cap", type=float, default=80.0, help="depth cap in metres")
    e.add_argument("--crop", type=_parse_crop, help="x,y,w,h evaluation rectangle")
    e.add_argument("--save-predictions", action="store_true", help="also write per-image PFMs")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="run the gradient-check suite")
    c.add_argument("--module", default="all", choices=["all", "diffcore", "warp", "loss", "model"])
    c.add_argument("--instances", type=int, default=20)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        with thread_limit(args.threads):
            return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, ManifestError, CheckpointError, FileNotFoundError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
