"""Command-line entry point.

Subcommands: synth, denoise, train-backbone, extract, run, eval.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

import argparse
import glob
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import cnn as cnn_mod
from . import rpca as rpca_mod
from .datahub import DataError, augment_array, load_dataset, save_dataset, synth_dataset
from .features import write_features
from .harness import ConfigError, RunConfig, load_report, run_scenario
from .pgm import read_pgm

USAGE_EXIT = 1
RUNTIME_EXIT = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(USAGE_EXIT)


def _build_parser() -> _Parser:
    p = _Parser(prog="proto-cil",
                description="Class-incremental learning engine and benchmark harness "
                            "for radar-style imagery.")
    p.add_argument("--threads", type=int,
                   default=int(os.environ.get("PROTO_CIL_THREADS", "1")),
                   help="intra-task feature-extraction fan-out "
                        "(env PROTO_CIL_THREADS as fallback; default 1)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset on disk")
    s.add_argument("--kind", choices=["blobs", "lowrank_speckle"], required=True)
    s.add_argument("--classes", type=int, required=True, help="number of classes (>= 2)")
    s.add_argument("--train", type=int, required=True, help="train samples per class")
    s.add_argument("--test", type=int, required=True, help="test samples per class")
    s.add_argument("--size", type=int, required=True, help="image side length")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("denoise",
                       help="train the low-rank denoiser and write sparse components")
    s.add_argument("--train-glob", required=True, help="PGM files to train on")
    s.add_argument("--apply-glob", required=True, help="PGM files to filter")
    s.add_argument("--rank", type=int, required=True)
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("train-backbone",
                       help="train the convnet on a dataset's train split")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--momentum", type=float, default=0.9)
    s.add_argument("--weight-decay", type=float, default=0.0005)
    s.add_argument("--d-cnn", type=int, default=256)
    s.add_argument("--dropout", type=float, default=0.5)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("extract",
                       help="extract features with a trained checkpoint into a CSV")
    s.add_argument("--manifest", required=True)
    s.add_argument("--model", required=True, help="checkpoint from train-backbone")
    s.add_argument("--split", choices=["train", "test"], default="train")
    s.add_argument("--out", required=True, help="feature CSV path")

    s = sub.add_parser("run", help="run a full CIL scenario")
    s.add_argument("--config", required=True, help="JSON run configuration")
    s.add_argument("--seed", type=int, help="override config seed")
    s.add_argument("--out", help="override output directory")
    s.add_argument("--fusion", choices=["late", "single"], help="override fusion mode")
    s.add_argument("--portion", type=float, help="override training-data portion")

    s = sub.add_parser("eval",
                       help="print metric tables for one or more report directories")
    s.add_argument("dirs", nargs="+", help="report directories with metrics.json")
    return p


def _augmented_train_set(manifest):
    from .seeding import derive_seed

    ds = load_dataset(manifest)
    train = [im for im in ds.samples if im.split == "train"]
    imgs = np.stack([augment_array(im.pixels, "cnn_train", derive_seed(0, "augment", i))
                     for i, im in enumerate(train)])
    return ds, train, imgs


def cmd_synth(args) -> int:
    if args.classes < 2:
        _usage_fail("--classes must be >= 2")
    if args.train < 1 or args.test < 1 or args.size < 1:
        _usage_fail("--train, --test, and --size must be >= 1")
    ds = synth_dataset(args.kind, args.classes, args.train, args.test, args.size, args.seed)
    manifest = save_dataset(ds, args.out)
    print(f"wrote {len(ds.samples)} images and {manifest}")
    return 0


def cmd_denoise(args) -> int:
    train_paths = sorted(glob.glob(args.train_glob))
    apply_paths = sorted(glob.glob(args.apply_glob))
    if not train_paths:
        raise DataError(f"no files match --train-glob {args.train_glob!r}")
    if not apply_paths:
        raise DataError(f"no files match --apply-glob {args.apply_glob!r}")
    if args.rank < 1:
        _usage_fail("--rank must be >= 1")
    images = [read_pgm(p) for p in train_paths]
    side = images[0].shape[0]
    for p, im in zip(train_paths, images):
        if im.shape != (side, side):
            raise DataError(f"{p}: expected {side}x{side} square image, got {im.shape}")
    model = rpca_mod.rpca_train(np.stack([im.ravel() for im in images]), r=args.rank,
                                epochs=args.epochs, lr=args.lr, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for p in apply_paths:
        img = read_pgm(p)
        decomp = rpca_mod.rpca_apply(model, img.ravel())
        rpca_mod.export_sparse_pgm(decomp, img.shape[0], out / Path(p).name)
    print(f"filtered {len(apply_paths)} images into {out}")
    return 0


def cmd_train_backbone(args) -> int:
    if not 0 <= args.dropout < 1:
        _usage_fail("--dropout must be in [0,1)")
    ds, train, imgs = _augmented_train_set(args.manifest)
    model = cnn_mod.cnn_init(args.d_cnn, args.dropout, args.seed,
                             num_classes=len(ds.classes))
    model = cnn_mod.cnn_train(model, imgs, [im.label for im in train],
                              epochs=args.epochs, lr=args.lr, momentum=args.momentum,
                              weight_decay=args.weight_decay, seed=args.seed)
    cnn_mod.save_cnn(model, args.out)
    final = model.history[-1] if model.history else (None, None, None)
    print(f"saved checkpoint {args.out} (final loss {final[1]}, accuracy {final[2]})")
    return 0


def cmd_extract(args) -> int:
    from .seeding import derive_seed

    ds = load_dataset(args.manifest)
    model = cnn_mod.load_cnn(args.model)
    samples = [im for im in ds.samples if im.split == args.split]
    imgs = np.stack([augment_array(im.pixels, "cnn_eval", derive_seed(0, "augment", i))
                     for i, im in enumerate(samples)])
    fm = cnn_mod.cnn_extract(model, imgs, [im.label for im in samples])
    write_features(fm, args.out)
    print(f"wrote {fm.rows.shape[0]}x{fm.dim} features to {args.out}")
    return 0


def cmd_run(args) -> int:
    cfg_path = Path(args.config)
    if not cfg_path.exists():
        _usage_fail(f"config not found: {cfg_path}")
    try:
        raw = json.loads(cfg_path.read_text())
    except json.JSONDecodeError as exc:
        _usage_fail(f"config is not valid JSON: {exc}")
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out is not None:
        raw["output_dir"] = args.out
    if args.fusion is not None:
        raw["fusion"] = args.fusion
    if args.portion is not None:
        raw["portion"] = args.portion
    raw.setdefault("threads", args.threads)
    try:
        config = RunConfig.from_dict(raw)
    except (ConfigError, TypeError) as exc:
        _usage_fail(str(exc))
    metrics = run_scenario(config)
    print(f"tasks: {len(metrics.task_accuracies)}  "
          f"avg accuracy: {metrics.avg_accuracy:.2f}  perf drop: {metrics.perf_drop:.2f}")
    if config.output_dir:
        print(f"report written to {config.output_dir}")
    return 0


def cmd_eval(args) -> int:
    reports = []
    for d in args.dirs:
        try:
            reports.append((d, load_report(d)))
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            print(f"cannot read report {d}: {exc}", file=sys.stderr)
            return RUNTIME_EXIT
    width = max(len(str(d)) for d, _ in reports)
    ntasks = max(len(m.task_accuracies) for _, m in reports)
    header = " | ".join(f"{t:>6d}" for t in range(ntasks))
    print(f"{'run':<{width}} | {header} |     PD |   Aavg")
    for d, m in reports:
        cells = " | ".join(f"{a:6.2f}" for a in m.task_accuracies)
        print(f"{str(d):<{width}} | {cells} | {m.perf_drop:6.2f} | {m.avg_accuracy:6.2f}")
    return 0


class _UsageError(Exception):
    pass


def _usage_fail(message):
    raise _UsageError(message)


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "synth": cmd_synth,
        "denoise": cmd_denoise,
        "train-backbone": cmd_train_backbone,
        "extract": cmd_extract,
        "run": cmd_run,
        "eval": cmd_eval,
    }
    try:
        return handlers[args.command](args)
    except _UsageError as exc:
        print(f"proto-cil {args.command}: error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except Exception as exc:  # runtime failures map to exit 2
        print(f"proto-cil {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
