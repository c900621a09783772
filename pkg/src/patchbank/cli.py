"""Command-line entry point tying the pipeline together.

Subcommands: synth, build-bank, decode, eval, bench, pretrain-toy.
Exit codes: 0 success, 2 usage or configuration error, 1 runtime error.
The PATCHBANK_THREADS environment variable caps BLAS thread pools.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import pretrain as pt
from .bank import SamplerConfig, build_bank, read_bank, write_bank
from .decoder import DecodeConfig, predict_image, write_predictions
from .errors import FileFormatError, UnusableConfigError
from .features import DEPTH, SEGMENTATION
from .hbfs import read_feature_set, write_feature_set
from .index import (IndexParams, build_exact, build_quantized, index_from_bytes,
                    index_to_bytes, scaled_params)
from .metrics import mean_iou, rmse_depth
from .synthetic import generate_synthetic_scene_set

# Production retrieval defaults; the low-data preset swaps in the
# hyperparameters used for few-image prompts.
DEFAULTS = dict(memory_size=10_240_000, k=30, temperature=0.02, aug_epochs=2,
                num_leaves=512, leaves_to_search=32, dims_per_block=4,
                reorder_n=120)
LOW_DATA_PRESET = dict(memory_size=20_480_000, k=90, temperature=0.1,
                       aug_epochs=8, leaves_to_search=256, reorder_n=1800)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchbank",
        description="In-context dense prediction via patch retrieval.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_retrieval_flags(p, with_bank_flags=True):
        p.add_argument("--k", type=int, default=DEFAULTS["k"],
                       help="nearest neighbors per query (default 30)")
        p.add_argument("--temperature", type=float, default=DEFAULTS["temperature"],
                       help="attention temperature (default 0.02)")
        if with_bank_flags:
            p.add_argument("--memory-size", type=int, default=DEFAULTS["memory_size"],
                           help="memory bank capacity (default 10240000)")
            p.add_argument("--aug-epochs", type=int, default=DEFAULTS["aug_epochs"],
                           help="augmentation epochs to ingest (default 2)")
        p.add_argument("--preset", choices=["low-data"],
                       help="swap in the low-data defaults: memory 20480000, "
                            "k 90, temperature 0.1, 8 epochs")

    def add_index_flags(p):
        p.add_argument("--index", choices=["exact", "quantized"], default="exact",
                       help="search structure (default exact)")
        p.add_argument("--num-leaves", type=int,
                       help="partitions (default 512, desk-scaled to the bank)")
        p.add_argument("--leaves-to-search", type=int,
                       help="partitions probed per query (default 32, scaled)")
        p.add_argument("--dims-per-block", type=int, default=DEFAULTS["dims_per_block"],
                       help="block width for 4-bit codes (default 4)")
        p.add_argument("--reorder-n", type=int,
                       help="candidates rescored exactly (default 120, scaled)")

    p = sub.add_parser("synth", help="generate a synthetic HBFS feature set")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--images", type=int, default=8)
    p.add_argument("--height", type=int, default=8)
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--image-offset", type=int, default=0)
    p.add_argument("--task", choices=[SEGMENTATION, DEPTH], default=SEGMENTATION)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("build-bank", help="build an HBMB memory bank from HBFS")
    p.add_argument("--features", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    add_retrieval_flags(p)
    p.add_argument("--downsample", action=argparse.BooleanOptionalAction,
                   default=True,
                   help="equal per-image sampling vs store-all (default on)")
    p.add_argument("--with-index", action="store_true",
                   help="append a quantized index section to the bank file")
    add_index_flags(p)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("decode", help="decode an HBFS query set into HBPR")
    p.add_argument("--features", required=True, type=Path)
    p.add_argument("--bank", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    add_retrieval_flags(p, with_bank_flags=False)
    add_index_flags(p)
    p.add_argument("--emit-distributions", action="store_true",
                   help="store per-pixel class distributions in the output")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="decode and score against the set's labels")
    p.add_argument("--features", required=True, type=Path)
    p.add_argument("--bank", required=True, type=Path)
    add_retrieval_flags(p, with_bank_flags=False)
    add_index_flags(p)
    p.add_argument("--report-csv", type=Path, help="also write the report as CSV")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("bench", help="latency/recall sweep over bank sizes")
    p.add_argument("--sizes", required=True,
                   help="comma-separated ascending bank sizes")
    p.add_argument("--queries", type=int, default=1024,
                   help="queries per lookup, one dense image (default 1024)")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--k", type=int, default=DEFAULTS["k"],
                   help="nearest neighbors per query (default 30)")
    p.add_argument("--modes", default="exact,quantized")
    p.add_argument("--out-csv", required=True, type=Path)
    p.add_argument("--out-svg", type=Path)
    p.add_argument("--memory-budget-gb", type=float, default=6.0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("pretrain-toy", help="run the toy pretraining loop")
    p.add_argument("--config", type=Path, help="key=value loss config file")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--images", type=int, default=16)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--out-log", required=True, type=Path,
                   help="loss CSV (step,total,ssl,sup)")
    p.add_argument("--out-params", type=Path,
                   help="final parameters as .npz")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    return parser


def _index_params(args, bank_size: int, k: int) -> IndexParams:
    base = scaled_params(bank_size, k=k, seed=getattr(args, "seed", 0))
    over = {}
    if args.num_leaves is not None:
        over["num_leaves"] = args.num_leaves
    if args.leaves_to_search is not None:
        over["leaves_to_search"] = args.leaves_to_search
    if args.reorder_n is not None:
        over["reorder_n"] = args.reorder_n
    over["dims_per_block"] = args.dims_per_block
    merged = {**base.__dict__, **over}
    return IndexParams(**merged)


def _apply_preset(args) -> None:
    if getattr(args, "preset", None) == "low-data":
        for name, value in LOW_DATA_PRESET.items():
            if hasattr(args, name):
                setattr(args, name, value)


def _load_index(args, bank, tail: bytes):
    if tail:
        return index_from_bytes(tail, bank)
    if args.index == "exact":
        return build_exact(bank)
    return build_quantized(bank, _index_params(args, len(bank), args.k))


def _cmd_synth(args) -> int:
    fset = generate_synthetic_scene_set(
        args.images, args.height, args.width, args.dim, args.classes,
        args.noise, args.seed, task=args.task, epochs=args.epochs,
        image_offset=args.image_offset)
    write_feature_set(fset, args.out)
    print(f"wrote {args.out}: {args.images} images x {args.epochs} epochs, "
          f"{args.height}x{args.width} patches, dim {args.dim}")
    return 0


def _cmd_build_bank(args) -> int:
    _apply_preset(args)
    fset = read_feature_set(args.features)
    cfg = SamplerConfig(capacity=args.memory_size,
                        aug_epochs=min(args.aug_epochs, len(fset.epochs)),
                        downsample=args.downsample, seed=args.seed)
    bank = build_bank(fset, cfg)
    section = b""
    if args.with_index:
        section = index_to_bytes(
            build_quantized(bank, _index_params(args, len(bank), args.k)))
    write_bank(bank, args.out, index_section=section)
    print(f"wrote {args.out}: {len(bank)} rows, dim {bank.dim}"
          + (", with index" if section else ""))
    return 0


def _decode_config(args) -> DecodeConfig:
    # Explicit search knobs also apply at query time, overriding whatever an
    # index section was built with.
    return DecodeConfig(k=args.k, temperature=args.temperature,
                        leaves_to_search=args.leaves_to_search,
                        reorder_n=args.reorder_n)


def _cmd_decode(args) -> int:
    _apply_preset(args)
    fset = read_feature_set(args.features)
    bank, tail = read_bank(args.bank)
    index = _load_index(args, bank, tail)
    cfg = _decode_config(args)
    preds = [predict_image(grid, index, bank, cfg)
             for grid, _ in fset.epochs[0]]
    write_predictions(preds, args.out,
                      with_distributions=args.emit_distributions)
    print(f"wrote {args.out}: {len(preds)} predictions")
    return 0


def _cmd_eval(args) -> int:
    _apply_preset(args)
    fset = read_feature_set(args.features)
    bank, tail = read_bank(args.bank)
    index = _load_index(args, bank, tail)
    cfg = _decode_config(args)
    preds = [predict_image(grid, index, bank, cfg)
             for grid, _ in fset.epochs[0]]
    if fset.task == SEGMENTATION:
        report = mean_iou([p.class_map for p in preds],
                          [lab.classes for _, lab in fset.epochs[0]],
                          fset.num_classes)
    else:
        report = rmse_depth([p.depth for p in preds],
                            [lab.depth for _, lab in fset.epochs[0]],
                            [lab.valid for _, lab in fset.epochs[0]])
    sys.stdout.write(report.to_text())
    if args.report_csv:
        args.report_csv.write_text(report.to_csv())
    return 0


def _cmd_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",") if s]
    modes = tuple(m for m in args.modes.split(",") if m)
    rows = bench_mod.run_latency_sweep(
        sizes, queries_per_size=args.queries, seed=args.seed, dim=args.dim,
        num_classes=args.classes, k=args.k, index_modes=modes,
        memory_budget_bytes=int(args.memory_budget_gb * 1e9))
    bench_mod.write_csv(rows, args.out_csv)
    if args.out_svg:
        bench_mod.emit_plot(rows, args.out_svg)
    for row in rows:
        print(f"{row.index_mode:9s} |M|={row.bank_size:>9d} "
              f"mean={row.mean_latency_us / 1000:.2f}ms "
              f"p50={row.p50_us / 1000:.2f}ms recall={row.recall_at_k:.4f}")
    return 0


def _cmd_pretrain_toy(args) -> int:
    cfg = pt.parse_loss_config(args.config) if args.config else pt.LossConfig()
    if args.seed is not None:
        cfg = pt.LossConfig(**{**cfg.__dict__, "seed": args.seed})
    state, rows = pt.run_toy_training(cfg, steps=args.steps,
                                      num_images=args.images, batch=args.batch)
    args.out_log.write_text(pt.loss_log_csv(rows))
    if args.out_params:
        np.savez(args.out_params, **state.params)
    print(f"trained {args.steps} steps: total {rows[0]['total']:.4f} -> "
          f"{rows[-1]['total']:.4f}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "build-bank": _cmd_build_bank,
    "decode": _cmd_decode,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "pretrain-toy": _cmd_pretrain_toy,
}


def _limit_threads() -> None:
    value = os.environ.get("PATCHBANK_THREADS")
    if not value:
        return
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(int(value))
    except (ImportError, ValueError):
        pass


def run_cli(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _limit_threads()
    try:
        return _COMMANDS[args.command](args)
    except UnusableConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (FileFormatError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
