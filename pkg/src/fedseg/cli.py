"""Command-line entry point.

Verbs: gen-synthetic, inspect-model, train, eval, compare-aggregators,
export-crops.  Every verb validates its full configuration before writing
anything.

Exit codes: 0 success, 2 invalid configuration or input, 3 runtime failure
(including client divergence), 4 file-system or checkpoint I/O.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint, reports
from .aggregators import KINDS
from .config import RunConfig, load_config, parse_width_scale
from .dataset import (
    DatasetStats,
    compute_stats,
    export_crops,
    generate_synthetic,
    load_manifest,
    load_split,
    prepare_training_set,
    standardize,
    write_synthetic,
)
from .errors import CheckpointError, ConfigError, FedSegError, ManifestError
from .federation import run_training, stack_samples, worker_count
from .io import atomic_write_text
from .metrics import evaluate_predictions
from .rng import make_rng
from .unet import UNetConfig, UNetModel, build_plan, build_unet, layer_table, parameter_summary, predict
from .weights import ModelWeights

log = logging.getLogger("fedseg")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4

CHECKPOINT_NAME = "model.fseg"
STATS_NAME = "stats.json"
CONFIG_NAME = "config.json"


# --------------------------------------------------------------------------- helpers


def _parse_list(text: str, kind=str) -> list:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise ConfigError(f"empty list: {text!r}")
    try:
        return [kind(t) for t in items]
    except ValueError:
        raise ConfigError(f"cannot parse list {text!r}") from None


def _config_from_args(args, need_manifest: bool) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "manifest", None):
        cfg = cfg.with_paths(manifest=args.manifest)
    if getattr(args, "output_dir", None):
        cfg = cfg.with_paths(output_dir=args.output_dir)
    if getattr(args, "rounds", None) is not None:
        cfg = cfg.with_fl(rounds=args.rounds)
    if getattr(args, "local_epochs", None) is not None:
        cfg = cfg.with_fl(local_epochs=args.local_epochs)
    if getattr(args, "workers", None) is not None:
        cfg = cfg.with_fl(workers=args.workers)
    if getattr(args, "no_wall_time", False):
        cfg = cfg.with_fl(log_wall_time=False)
    if getattr(args, "aggregator", None):
        cfg = cfg.with_aggregator(kind=args.aggregator)
    if getattr(args, "noise_multiplier", None) is not None:
        cfg = cfg.with_aggregator(noise_multiplier=args.noise_multiplier)
    cfg.validate(need_manifest=need_manifest)
    worker_count(cfg.fl)  # surfaces a malformed FEDSEG_THREADS before any output is written
    return cfg


def _check_figures(args) -> None:
    if getattr(args, "figures", False):
        try:
            reports.require_matplotlib()
        except ImportError as exc:
            raise ConfigError(str(exc)) from None


def _load_data(cfg: RunConfig):
    manifest = load_manifest(cfg.paths.manifest)
    h, w = cfg.unet.input_h, cfg.unet.input_w
    train = load_split(manifest, "train", h, w)
    test = load_split(manifest, "test", h, w)
    if not train:
        raise ConfigError("manifest has no train records")
    if not test:
        raise ConfigError("manifest has no test records")
    return train, test


def _needs_stats(cfg: RunConfig) -> bool:
    return cfg.augment.featurewise_center or cfg.augment.featurewise_std_normalization


def _prepare(cfg: RunConfig, train, test):
    stats = compute_stats(train) if _needs_stats(cfg) else None
    train_set = prepare_training_set(train, cfg.augment, stats, make_rng(cfg.augment.seed, 0xA09))
    test_set = [standardize(s, cfg.augment, stats) for s in test]
    return train_set, test_set, stats


def _aggregator_label(cfg: RunConfig) -> str:
    return cfg.fl.aggregator.kind


def _load_model(path: Path, unet_cfg: UNetConfig) -> UNetModel:
    model = build_unet(unet_cfg)
    weights = checkpoint.load(path, trainable=None)
    if list(weights) != list(model.weights) or weights.shapes() != model.weights.shapes():
        raise CheckpointError(f"{path}: tensors do not match the configured model")
    return model.with_weights(ModelWeights(dict(weights.items()), model.weights.trainable))


def _eval_context(args):
    """Config, stats and model for commands that consume a checkpoint."""
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    config_path = args.config or (ckpt.parent / CONFIG_NAME if (ckpt.parent / CONFIG_NAME).is_file() else None)
    args.config = config_path
    cfg = _config_from_args(args, need_manifest=True)
    stats = None
    if _needs_stats(cfg):
        stats_path = Path(args.stats) if args.stats else ckpt.parent / STATS_NAME
        if not stats_path.is_file():
            raise ConfigError(f"feature-wise normalization needs dataset statistics; {stats_path} not found")
        stats = DatasetStats.load(stats_path)
    return ckpt, cfg, stats


# --------------------------------------------------------------------------- commands


def cmd_gen_synthetic(args) -> int:
    if args.count <= 0:
        raise ConfigError("--count must be positive")
    if args.size <= 0 or args.size % 16:
        raise ConfigError("--size must be a positive multiple of 16")
    if not 0 <= args.test_fraction < 1:
        raise ConfigError("--test-fraction must lie in [0, 1)")
    out = Path(args.out)
    if (out / "manifest.jsonl").exists() and not args.force:
        raise ConfigError(f"{out} already holds a dataset; pass --force to overwrite")
    n_test = int(round(args.count * args.test_fraction))
    if args.test_fraction > 0 and args.count > 1:
        n_test = min(max(n_test, 1), args.count - 1)
    samples = generate_synthetic(args.count, args.size, args.size, make_rng(args.seed, 0x5A7))
    splits = ["train"] * (args.count - n_test) + ["test"] * n_test
    manifest = write_synthetic(out, samples, splits)
    print(f"wrote {args.count} samples ({args.count - n_test} train / {n_test} test) to {manifest}")
    return EXIT_OK


def cmd_inspect_model(args) -> int:
    cfg = load_config(args.config).unet
    if args.full_size:
        cfg = UNetConfig.full_size()
    if args.width_scale is not None:
        cfg = replace(cfg, width_scale=parse_width_scale(args.width_scale))
    if args.size is not None:
        cfg = replace(cfg, input_h=args.size, input_w=args.size)
    cfg.validate()
    plan = build_plan(cfg)
    rows = layer_table(plan)
    total, trainable, non = parameter_summary(plan)
    if args.format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "type", "output_shape", "params"])
        for name, kind, shape, params in rows:
            writer.writerow([name, kind, str(shape), params])
        sys.stdout.write(buf.getvalue())
    else:
        width = max(len(f"{n} ({k})") for n, k, _, _ in rows)
        print(f"{'Layer (type)':<{width}}  {'Output Shape':<22}  Param #")
        for name, kind, shape, params in rows:
            print(f"{f'{name} ({kind})':<{width}}  {str(shape):<22}  {params:,}")
        print(f"Total params: {total:,}")
        print(f"Trainable params: {trainable:,}")
        print(f"Non-trainable params: {non:,}")
    print(f"{total:,} / {trainable:,} / {non:,}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config_from_args(args, need_manifest=True)
    _check_figures(args)
    train, test = _load_data(cfg)
    train_set, test_set, stats = _prepare(cfg, train, test)

    out = Path(cfg.paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    logs = []

    def on_round(entry):
        logs.append(entry)
        # rewritten every round so a later divergence still leaves the completed rounds on disk
        reports.write_round_log(out / "round_log.csv", logs)

    model = build_unet(cfg.unet)
    reports.write_round_log(out / "round_log.csv", logs)
    result = run_training(model, cfg.fl, train_set, test_set, cfg.metrics, on_round=on_round)

    checkpoint.save(out / CHECKPOINT_NAME, result.model.weights)
    if stats is not None:
        stats.save(out / STATS_NAME)
    atomic_write_text(out / CONFIG_NAME, cfg.to_json())
    reports.write_metrics(out / "metrics.csv", [
        reports.metrics_row(result.report, CHECKPOINT_NAME, _aggregator_label(cfg), "test"),
    ])
    if args.figures:
        reports.plot_training_curves(out / "training_curves.png", result.logs)
    print(f"test dice {result.report.dice:.4f}  iou {result.report.iou:.4f}  "
          f"accuracy {result.report.accuracy:.4f}  -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt, cfg, stats = _eval_context(args)
    manifest = load_manifest(cfg.paths.manifest)
    samples = load_split(manifest, args.split, cfg.unet.input_h, cfg.unet.input_w)
    if not samples:
        raise ConfigError(f"manifest has no {args.split!r} records")
    model = _load_model(ckpt, cfg.unet)
    x, y = stack_samples([standardize(s, cfg.augment, stats) for s in samples])
    report = evaluate_predictions(y, predict(model, x), cfg.metrics)
    out = Path(args.output) if args.output else ckpt.parent / f"metrics_{args.split}.csv"
    reports.write_metrics(out, [reports.metrics_row(report, ckpt.name, _aggregator_label(cfg), args.split)])
    print(f"{args.split}: dice {report.dice:.4f}  iou {report.iou:.4f}  rmse {report.rmse:.4f}  -> {out}")
    return EXIT_OK


def cmd_export_crops(args) -> int:
    ckpt, cfg, stats = _eval_context(args)
    manifest = load_manifest(cfg.paths.manifest)
    samples = load_split(manifest, args.split, cfg.unet.input_h, cfg.unet.input_w)
    if not samples:
        raise ConfigError(f"manifest has no {args.split!r} records")
    model = _load_model(ckpt, cfg.unet)
    x, _ = stack_samples([standardize(s, cfg.augment, stats) for s in samples])
    masks = (predict(model, x) >= cfg.metrics.binarize_threshold).astype(np.float32)
    result = export_crops(samples, masks, args.out)
    print(f"wrote {len(result.files)} crops for {len(samples)} images to {args.out}")
    return EXIT_OK


def cmd_compare_aggregators(args) -> int:
    kinds = _parse_list(args.aggregators)
    for k in kinds:
        if k not in KINDS:
            raise ConfigError(f"unknown aggregator {k!r}; expected one of {', '.join(KINDS)}")
    seeds = _parse_list(args.seeds, int)
    base = _config_from_args(args, need_manifest=True)
    runs = [(k, s, base.with_seed(s).with_aggregator(kind=k)) for s in seeds for k in kinds]
    for _, _, cfg in runs:
        cfg.validate()
    _check_figures(args)
    train, test = _load_data(base)

    out = Path(base.paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    results, curves, metric_rows = [], [], []
    prepared = {}
    for kind, seed, cfg in sorted(runs, key=lambda r: (kinds.index(r[0]), r[1])):
        if seed not in prepared:
            prepared[seed] = _prepare(cfg, train, test)
        train_set, test_set, _ = prepared[seed]
        log.info("compare: aggregator %s seed %d", kind, seed)
        result = run_training(build_unet(cfg.unet), cfg.fl, train_set, test_set, cfg.metrics)
        results.append((kind, seed, result.report))
        curves += reports.curve_rows(kind, seed, result.logs)
        metric_rows.append(reports.metrics_row(result.report, f"seed{seed}", kind, "test"))
    rows = reports.compare_rows(results)
    reports.write_compare(out / "compare.csv", rows)
    reports.write_curves(out / "curves.csv", curves)
    reports.write_metrics(out / "metrics.csv", metric_rows)
    if args.figures:
        reports.plot_compare(out / "compare.png", rows)
    for r in rows:
        if r["seed"] == "mean":
            print(f"{r['aggregator']:>5}: dice {r['dice']:.4f}  iou {r['iou']:.4f}  rmse {r['rmse']:.4f}")
    print(f"-> {out / 'compare.csv'}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p = argparse.ArgumentParser(prog="fedseg", description="Federated U-Net segmentation simulator.",
                                parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", parents=[common], help="write a synthetic plate dataset")
    g.add_argument("--count", type=int, default=576)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--test-fraction", type=float, default=1 / 9, help="share of samples in the test split")
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    g.set_defaults(func=cmd_gen_synthetic)

    i = sub.add_parser("inspect-model", parents=[common], help="print the layer table and parameter totals")
    i.add_argument("--config")
    i.add_argument("--full-size", action="store_true", help="use the full-size 192x192, width 1 configuration")
    i.add_argument("--width-scale", help="filter multiplier, e.g. 1 or 1/4")
    i.add_argument("--size", type=int)
    i.add_argument("--format", choices=("table", "csv"), default="table")
    i.set_defaults(func=cmd_inspect_model)

    def run_options(sp, aggregator=True):
        sp.add_argument("--config")
        sp.add_argument("--manifest")
        sp.add_argument("--output-dir")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--rounds", type=int)
        sp.add_argument("--local-epochs", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--noise-multiplier", type=float)
        sp.add_argument("--no-wall-time", action="store_true", help="write 0 for wall_ms so logs are reproducible")
        sp.add_argument("--figures", action="store_true", help="also render PNG figures (needs matplotlib)")
        if aggregator:
            sp.add_argument("--aggregator", choices=KINDS)

    t = sub.add_parser("train", parents=[common], help="federated training run")
    run_options(t)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("compare-aggregators", parents=[common], help="train once per aggregator and seed")
    run_options(c, aggregator=False)
    c.add_argument("--aggregators", default=",".join(KINDS))
    c.add_argument("--seeds", default="0,1,2")
    c.set_defaults(func=cmd_compare_aggregators)

    for name, func, helptext in (("eval", cmd_eval, "score a checkpoint on a split"),
                                 ("export-crops", cmd_export_crops, "write plate crops from predicted masks")):
        e = sub.add_parser(name, parents=[common], help=helptext)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--manifest")
        e.add_argument("--config", help="defaults to config.json next to the checkpoint")
        e.add_argument("--stats", help="defaults to stats.json next to the checkpoint")
        e.add_argument("--split", default="test")
        if name == "eval":
            e.add_argument("--output", help="metrics CSV path")
        else:
            e.add_argument("--out", required=True)
        e.set_defaults(func=func)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FedSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
