"""``lusc`` command line.

Exit codes: 0 success, 1 missing or unreadable input, 2 configuration
error, 3 numerical divergence, 4 artifact mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, load_config
from .data import DatasetError
from .experiment import OverlapError, run_compare, run_evaluate, run_import, run_split, run_train
from .synthetic import write_blobs
from .training import CheckpointError, DivergenceError, FingerprintMismatch

EXIT_OK, EXIT_INPUT, EXIT_CONFIG, EXIT_DIVERGED, EXIT_MISMATCH = 0, 1, 2, 3, 4

log = logging.getLogger("lusc")


def _config(args):
    cfg = load_config(args.config)
    return cfg.with_overrides(seed=getattr(args, "seed", None), out=getattr(args, "out_dir", None))


def cmd_import(args) -> int:
    cfg = load_config(args.config)
    path = run_import(cfg, root=args.root, out=args.out)
    print(path)
    return EXIT_OK


def cmd_split(args) -> int:
    cfg = _config(args)
    print(run_split(cfg, out=args.out))
    return EXIT_OK


def cmd_train(args) -> int:
    result = run_train(_config(args))
    print(json.dumps({"out_dir": str(result.out_dir), "epochs": len(result.log.records),
                      "val_macro": result.report.macro}, indent=2))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    report = run_evaluate(cfg, args.checkpoint, args.subset, args.split, out=args.report_dir)
    print(json.dumps(report.macro, indent=2))
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _config(args)
    print(json.dumps(run_compare(cfg), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_make_blobs(args) -> int:
    print(write_blobs(args.out, args.per_class, args.size, args.seed))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lusc", description="AlexNet vs ViT land-use scene classification harness")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True, out_dir=True):
        sp.add_argument("--config", required=True, help="experiment TOML file")
        if seed:
            sp.add_argument("--seed", type=int, help="override split and training seeds")
        if out_dir:
            sp.add_argument("--out", dest="out_dir", help="override output directory")

    sp = sub.add_parser("import", help="decode a class-per-folder dataset into an archive")
    common(sp, seed=False, out_dir=False)
    sp.add_argument("--root", help="dataset root (overrides dataset.root)")
    sp.add_argument("--out", help="archive path (overrides dataset.archive)")
    sp.set_defaults(func=cmd_import)

    sp = sub.add_parser("split", help="write the stratified train/val/test split")
    common(sp, out_dir=False)
    sp.add_argument("--out", help="split JSON path (default <output.dir>/split.json)")
    sp.set_defaults(func=cmd_split)

    sp = sub.add_parser("train", help="train the configured model")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="evaluate a checkpoint on a subset")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--subset", choices=("train", "val", "test"), default="test")
    sp.add_argument("--split", help="split JSON (default: recomputed from the config)")
    sp.add_argument("--report-dir", help="where to write the report (default <output.dir>/<model>)")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("compare", help="train and test AlexNet and ViT under identical conditions")
    common(sp)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("make-blobs", help="write the synthetic three-class blob dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--per-class", type=int, default=100)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_make_blobs)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FingerprintMismatch, OverlapError) as exc:
        print(f"artifact mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (DatasetError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
