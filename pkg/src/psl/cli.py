"""Command-line surface.

Every subcommand reads an optional TOML config (--config), honors --seed,
and writes artifacts under --out.  Exit codes: 0 success, 1 contract/config
violations, 2 IO or parse failures, 64 usage errors.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_CONTRACT = 1
EXIT_IO = 2
EXIT_USAGE = 64


class _Parser(argparse.ArgumentParser):
    """argparse exits with code 2 on bad flags; the contract wants 64."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _build_parser():
    parser = _Parser(prog="psl", description="Pain-assessment pipeline tools")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="TOML experiment config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", default="out", help="output directory")
        return p

    add("gen-toy-data", "generate the synthetic paired RGB/thermal dataset")
    add("train-gan", "train the RGB->thermal translation GAN")
    p = add("translate", "translate a directory of PPM frames with a trained generator")
    p.add_argument("--checkpoint", required=True, help="generator .pslb checkpoint")
    p.add_argument("--frames", required=True, help="directory of source PPM frames")
    add("train", "fit one classifier on the full dataset")
    add("loso", "leave-one-subject-out cross-validation")
    add("blur-sweep", "LOSO at each Gaussian blur kernel size")
    add("fuse-eval", "LOSO under each fusion mode")
    add("count-params", "print parameter counts for the configured model")
    add("count-flops", "print forward FLOPs for the configured model")
    add("gradcheck", "finite-difference check of the core composites")
    p = add("metrics", "recompute summary metrics from a folds.csv")
    p.add_argument("--folds", required=True, help="path to a folds.csv")
    return parser


def _load_spec(args):
    from .config import ExperimentSpec, load_config

    spec = load_config(args.config) if args.config else ExperimentSpec()
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
        spec.toy_data = dataclasses.replace(spec.toy_data, seed=args.seed)
    return spec


def _cmd_gen_toy_data(args):
    from .data import generate_toy_dataset

    spec = _load_spec(args)
    records = generate_toy_dataset(spec.toy_data, args.out)
    print(f"wrote {len(records)} manifest rows under {args.out}")
    return EXIT_OK


def _cmd_train_gan(args):
    from .experiment import run_gan_training

    spec = _load_spec(args)
    result = run_gan_training(spec, args.out)
    print(f"generator MAE {result['mae_init']:.4f} -> {result['mae_final']:.4f} "
          f"over {spec.gan_steps} steps")
    return EXIT_OK


def _cmd_translate(args):
    from .experiment import run_translate

    spec = _load_spec(args)
    n = run_translate(spec, args.checkpoint, args.frames, Path(args.out) / "translated")
    print(f"translated {n} frames into {args.out}/translated")
    return EXIT_OK


def _cmd_train(args):
    from .experiment import run_train

    spec = _load_spec(args)
    report, _ = run_train(spec, args.out)
    print(f"train accuracy {report.accuracy:.4f}  "
          f"recall {report.recall_macro:.4f}  f1 {report.f1_macro:.4f}")
    return EXIT_OK


def _cmd_loso(args):
    from .experiment import run_loso

    spec = _load_spec(args)
    report, folds = run_loso(spec, args.out)
    print(f"LOSO over {len(folds)} folds: accuracy {report.accuracy:.4f} "
          f"(fold mean {report.fold_mean_accuracy:.4f})  "
          f"recall {report.recall_macro:.4f}  f1 {report.f1_macro:.4f}")
    return EXIT_OK


def _cmd_blur_sweep(args):
    from .experiment import BLUR_GRID, run_blur_sweep

    spec = _load_spec(args)
    summary = run_blur_sweep(spec, args.out)
    for k in BLUR_GRID:
        print(f"k={k}: accuracy {summary[str(k)]['accuracy']:.4f}")
    return EXIT_OK


def _cmd_fuse_eval(args):
    from .experiment import run_fuse_eval

    spec = _load_spec(args)
    summary = run_fuse_eval(spec, args.out)
    for mode, payload in summary.items():
        print(f"{mode}: accuracy {payload['accuracy']:.4f}")
    return EXIT_OK


def _cmd_count_params(args):
    from .backbone import count_params as backbone_params
    from .temporal import count_params as temporal_params

    spec = _load_spec(args)
    b = backbone_params(spec.backbone)
    t = temporal_params(spec.temporal())
    print(f"backbone params: {b}")
    print(f"temporal params: {t}")
    print(f"total params: {b + t}")
    print("published reference: 7.35M (backbone) + 7.96M (temporal) = 15.31M params")
    return EXIT_OK


def _cmd_count_flops(args):
    from .training import backbone_flops, temporal_flops

    spec = _load_spec(args)
    b = backbone_flops(spec.backbone)
    t = temporal_flops(spec.temporal())
    print(f"backbone flops: {b}")
    print(f"temporal flops: {t}")
    print(f"total flops: {b + t}")
    print("published reference: 30.95G (backbone) + 30.90G (temporal) = 61.85G FLOPS")
    return EXIT_OK


def _gradcheck_suite(seed=0):
    """Max relative finite-difference error over the core composites."""
    from . import tensorcore as tc
    from .backbone import _wave_params, wave_block
    from .temporal import _attention_params, attention
    from .tensorcore import Tensor, gradcheck
    from .training import MultiTaskWeights, multitask_loss

    rng = np.random.default_rng(seed)
    errors = {}
    with tc.default_dtype(np.float64):
        wp = _wave_params(rng, 3, 4)
        tokens = rng.normal(size=(3, 4))
        errors["wave_block"] = gradcheck(
            lambda t: tc.sum_(wave_block(t, wp)), Tensor(tokens, requires_grad=True))

        ap = _attention_params(rng, 4, heads=2)
        x = rng.normal(size=(3, 4))
        errors["attention"] = gradcheck(
            lambda t: tc.sum_(attention(t, t, t, 2, ap)),
            Tensor(x, requires_grad=True))

        w1 = Tensor(0.3, requires_grad=True, dtype=np.float64)
        w2 = Tensor(-0.1, requires_grad=True, dtype=np.float64)
        errors["multitask_loss"] = gradcheck(
            lambda t: multitask_loss(tc.sum_(tc.mul(t, t)), Tensor(0.7),
                                     MultiTaskWeights(w1, w2)),
            Tensor(rng.normal(size=4), requires_grad=True))

        v_rgb = Tensor(rng.normal(size=6))
        errors["fuse_w1"] = gradcheck(
            lambda t: tc.sum_(tc.mul(t, v_rgb)), Tensor(np.array(1.0), requires_grad=True))
    return errors


def _cmd_gradcheck(args):
    spec = _load_spec(args)
    errors = _gradcheck_suite(spec.seed)
    worst = max(errors.values())
    for name, err in sorted(errors.items()):
        print(f"{name}: {err:.3e}")
    print(f"max relative error: {worst:.3e}")
    return EXIT_OK if worst < 1e-4 else EXIT_CONTRACT


def _cmd_metrics(args):
    from .errors import ParseError

    with open(args.folds, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:6] != ["subject_id", "task", "n_test", "n_correct",
                                        "recall_macro", "f1_macro"]:
            raise ParseError(f"{args.folds}: unexpected folds.csv header {header}")
        rows = [row for row in reader if row]
    if not rows:
        raise ParseError(f"{args.folds}: no fold rows")
    n_test = sum(int(r[2]) for r in rows)
    n_correct = sum(int(r[3]) for r in rows)
    payload = {
        "accuracy": n_correct / n_test,
        "fold_mean_accuracy": float(np.mean([int(r[3]) / int(r[2]) for r in rows])),
        "recall_macro": float(np.mean([float(r[4]) for r in rows])),
        "f1_macro": float(np.mean([float(r[5]) for r in rows])),
        "folds": len(rows),
    }
    print(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


_COMMANDS = {
    "gen-toy-data": _cmd_gen_toy_data,
    "train-gan": _cmd_train_gan,
    "translate": _cmd_translate,
    "train": _cmd_train,
    "loso": _cmd_loso,
    "blur-sweep": _cmd_blur_sweep,
    "fuse-eval": _cmd_fuse_eval,
    "count-params": _cmd_count_params,
    "count-flops": _cmd_count_flops,
    "gradcheck": _cmd_gradcheck,
    "metrics": _cmd_metrics,
}


def cli(argv=None):
    from .errors import ParseError, PslError

    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except PslError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


def main():
    sys.exit(cli())


if __name__ == "__main__":
    main()
