"""Command-line entry point.

    patmod <gen-data|train|eval|reconstruct|sweep|interpolate> [--config PATH] [flags...]

Exit codes: 0 success, 2 config/contract error, 3 I/O error, 4 numerical abort.
``PATMOD_THREADS`` opts into parallel batch evaluation (default 1, deterministic).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data
from .errors import ConfigError, ContractError, DomainError, NumericalAbort
from .model import PatternModel, load_checkpoint, ModelConfig
from .runconfig import RunConfig, load_run_config
from .training import (
    TrainConfig,
    evaluate,
    interpolate_latent,
    sweep,
    train,
    write_metrics_csv,
    write_sweep_csv,
)

logger = logging.getLogger("patmod")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError) as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except (OSError, DomainError) as exc:
        logger.error("%s", exc)
        return EXIT_IO
    except NumericalAbort as exc:
        logger.error("numerical abort: %s", exc)
        return EXIT_NUMERIC


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patmod", description=__doc__)
    sub = parser.add_subparsers(required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    _common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    _common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--no-local", action="store_true")
    p.add_argument("--no-patterns", action="store_true")
    p.add_argument("--no-shift", action="store_true")
    p.add_argument("--no-l-region", action="store_true")
    p.add_argument("--no-l-shape", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "seen", "unseen"], default="seen")
    p.add_argument("--points", type=int, help="downsample both sides to this count")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reconstruct", help="reconstruct a point cloud from one image")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--dump-trace", action="store_true", help="also write S, patterns, R', U files")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("sweep", help="train/evaluate a grid over one parameter")
    _common(p)
    p.add_argument("--parameter", required=True, choices=["alpha", "M", "N", "sampling_mode"])
    p.add_argument("--values", required=True, help="comma-separated value list")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("interpolate", help="reconstruct along interpolated image codes")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image-a", required=True)
    p.add_argument("--image-b", required=True)
    p.add_argument("--steps", type=int, default=5)
    p.set_defaults(func=cmd_interpolate)

    return parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key")
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--dataset", help="dataset directory (overrides dataset_dir)")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")


def _resolve(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key] = value
    cfg = load_run_config(args.config, overrides)
    if args.out:
        cfg.out_dir = args.out
    if args.dataset:
        cfg.dataset_dir = args.dataset
    env_threads = os.environ.get("PATMOD_THREADS")
    if env_threads:
        cfg.threads = max(1, int(env_threads))
    for flag in ("no_local", "no_patterns", "no_shift", "no_l_region", "no_l_shape"):
        if getattr(args, flag, False):
            setattr(cfg, flag, True)
    for key in ("epochs", "seed", "batch_size"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    return cfg


def _prepare_out(path, force: bool, expected: list[str]) -> Path:
    out = Path(path)
    if out.exists():
        clashes = [name for name in expected if (out / name).exists()]
        if clashes and not force:
            raise OSError(f"{out}: outputs {clashes} exist; rerun with --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    root = Path(cfg.dataset_dir)
    if (root / "manifest.jsonl").exists() and not args.force:
        raise OSError(f"{root}: manifest exists; rerun with --force to regenerate")
    manifest = data.write_dataset(root, cfg.dataset_split(), cfg.image_size)
    cfg.write(root / "config_resolved.txt")
    records = data.read_manifest(manifest)
    counts = {}
    for rec in records:
        counts[rec["split"]] = counts.get(rec["split"], 0) + 1
    split = cfg.dataset_split()
    print(
        f"generated {len(records)} samples "
        f"({len(split.seen_classes)} seen + {len(split.unseen_classes)} unseen classes): "
        + ", ".join(f"{k}={v}" for k, v in sorted(counts.items()))
    )
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    manifest = Path(cfg.dataset_dir) / "manifest.jsonl"
    if not manifest.exists():
        raise OSError(f"{manifest}: dataset not found; run gen-data first")
    samples = data.load_samples(manifest, "train")
    out = _prepare_out(cfg.out_dir, args.force, ["checkpoint.pmod", "metrics.csv"])
    cfg.write(out / "config_resolved.txt")
    model = PatternModel(cfg.model_config(), seed=cfg.model_seed)
    records, _ = train(samples, model, cfg.train_config(), out_dir=out)
    write_metrics_csv(out / "metrics.csv", records)
    print(f"trained {cfg.epochs} epochs on {len(samples)} samples -> {out / 'checkpoint.pmod'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    model, _ = load_checkpoint(args.checkpoint)
    split_map = {"train": "train", "seen": "test_seen", "unseen": "test_unseen"}
    manifest = Path(cfg.dataset_dir) / "manifest.jsonl"
    samples = data.load_samples(manifest, split_map[args.split])
    if not samples:
        raise ConfigError(f"no samples in split {args.split!r}")
    points = args.points if args.points else (cfg.eval_points or None)
    records = evaluate(model, samples, args.split, eval_points=points)
    out = _prepare_out(cfg.out_dir, True, [])
    csv_path = out / f"eval_{args.split}.csv"
    write_metrics_csv(csv_path, records)
    for rec in records:
        print(f"{rec.split}/{rec.class_label}: cd={rec.cd_eval:.6f} iou={rec.iou:.4f}")
    print(f"wrote {csv_path}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    cfg = _resolve(args)
    model, _ = load_checkpoint(args.checkpoint)
    image = data.read_pgm(args.image)
    out = _prepare_out(cfg.out_dir, args.force, ["reconstruction.xyz", "reconstruction.ply"])
    cfg.write(out / "config_resolved.txt")
    trace = model.reconstruct(image)
    data.write_xyz(out / "reconstruction.xyz", trace.f_cloud)
    data.write_ply(out / "reconstruction.ply", trace.f_cloud)
    if args.dump_trace:
        data.write_xyz(out / "initial_prediction.xyz", trace.s_cloud)
        if trace.patterns is not None:
            for n, pattern in enumerate(trace.patterns):
                data.write_xyz(out / f"pattern_{n}.xyz", pattern)
        if trace.r_prime is not None:
            for m, block in enumerate(trace.r_prime):
                data.write_xyz(out / f"modularized_region_{m}.xyz", block)
            for m, block in enumerate(trace.u):
                data.write_xyz(out / f"customized_region_{m}.xyz", block)
    print(f"reconstructed {trace.f_cloud.shape[0]} points -> {out / 'reconstruction.xyz'}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _resolve(args)
    manifest = Path(cfg.dataset_dir) / "manifest.jsonl"
    dataset = {
        "train": data.load_samples(manifest, "train"),
        "test_seen": data.load_samples(manifest, "test_seen"),
        "test_unseen": data.load_samples(manifest, "test_unseen"),
    }
    values = [v for v in args.values.split(",") if v]
    out = _prepare_out(cfg.out_dir, args.force, [f"sweep_{args.parameter}.csv"])
    cfg.write(out / "config_resolved.txt")
    rows = sweep(
        args.parameter, values, cfg.model_config(), cfg.train_config(), dataset, cfg.model_seed
    )
    if not rows:
        raise ConfigError(f"no valid values for sweep parameter {args.parameter!r}")
    csv_path = out / f"sweep_{args.parameter}.csv"
    write_sweep_csv(csv_path, rows)
    for r in rows:
        print(f"{args.parameter}={r['value']}: cd_seen={r['cd_seen']:.6f} cd_unseen={r['cd_unseen']:.6f}")
    print(f"wrote {csv_path}")
    return EXIT_OK


def cmd_interpolate(args) -> int:
    cfg = _resolve(args)
    if args.steps < 2:
        raise ConfigError(f"--steps must be >= 2, got {args.steps}")
    model, _ = load_checkpoint(args.checkpoint)
    image_a = data.read_pgm(args.image_a)
    image_b = data.read_pgm(args.image_b)
    out = _prepare_out(cfg.out_dir, args.force, ["interp_0.000.xyz"])
    cfg.write(out / "config_resolved.txt")
    for lam, cloud in interpolate_latent(model, image_a, image_b, args.steps):
        data.write_xyz(out / f"interp_{lam:.3f}.xyz", cloud)
    print(f"wrote {args.steps} interpolated reconstructions to {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
