"""Command-line surface: gen-data, train, eval, gradcheck, compare-baseline.

Exit codes: 0 success, 1 operational failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .fileio import (
    ConfigError,
    FormatError,
    load_config,
    read_dataset,
)
from .gradcheck import run_gradient_suite
from .synth import GenerationError, generate_dataset
from .trainer import (
    ArchitectureMismatchError,
    EvaluationError,
    TrainingDivergenceError,
    compare_heads,
    evaluate_checkpoint,
    train,
)

_FAILURES = (
    ConfigError,
    FormatError,
    GenerationError,
    ArchitectureMismatchError,
    EvaluationError,
    TrainingDivergenceError,
    FileNotFoundError,
    ValueError,
)


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="ccn",
        description="Joint category and viewpoint estimation head: data, training, checks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset files")
    p.add_argument("--config", required=True, help="path to a key = value config file")
    p.add_argument("--out", required=True, help="train dataset path (val sibling derived)")

    p = sub.add_parser("train", help="train a model per the config")
    p.add_argument("--config", required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--porcelain", action="store_true", help="key=value lines for scripting")

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=10)

    p = sub.add_parser("compare-baseline", help="CCN vs view-agnostic head over matched seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=int, default=3)

    return parser


def _print_report(report, porcelain):
    if porcelain:
        print(report.as_porcelain())
        return
    print(f"samples        {report.n_samples}")
    print(f"top-1          {report.top1:.4f}")
    print(f"top-3          {report.top3:.4f}")
    print(f"Acc_pi/6       {report.acc_pi_6:.4f}")
    print(f"MedErr (deg)   {report.mederr_deg:.2f}")
    if report.mederr_correct_deg is not None:
        print(f"MedErr|correct {report.mederr_correct_deg:.2f}")
    print(f"AOS            {report.aos:.4f}")
    print(f"AVP-joint      {report.avp_joint:.4f}")
    for label in sorted(report.per_class):
        stats = report.per_class[label]
        print(
            f"class {label}: top-1 {stats['top1']:.4f}  MedErr {stats['mederr_deg']:.2f}"
            f"  (n={stats['count']})"
        )


def _cmd_gen_data(args):
    cfg = load_config(args.config)
    train_path, val_path = generate_dataset(cfg.gen_config(), args.out)
    train_n = read_dataset(train_path)[1].n_samples
    val_n = read_dataset(val_path)[1].n_samples
    print(f"wrote {train_path} ({train_n} samples) and {val_path} ({val_n} samples)")
    return 0


def _cmd_train(args):
    cfg = load_config(args.config)
    result = train(cfg)
    last = result.history[-1]
    print(f"trained {cfg.epochs} epochs in {result.seconds:.1f}s -> {result.checkpoint_path}")
    print(f"final val top-1 {last.val_top1:.4f}, val MedErr {last.val_mederr_deg:.2f} deg")
    print(f"log: {cfg.resolved_log_path()}")
    return 0


def _cmd_eval(args):
    report = evaluate_checkpoint(args.checkpoint, args.data)
    _print_report(report, args.porcelain)
    return 0


def _cmd_gradcheck(args):
    reports = run_gradient_suite(n_seeds=args.seeds)
    failed = 0
    for report in reports:
        print(report)
        failed += 0 if report.passed else 1
    print(f"{len(reports) - failed}/{len(reports)} gradient checks passed")
    return 1 if failed else 0


def _cmd_compare_baseline(args):
    cfg = load_config(args.config)
    train_samples, _ = read_dataset(cfg.train_data)
    val_samples, _ = read_dataset(cfg.resolved_val_data())
    result = compare_heads(cfg, train_samples, val_samples, n_seeds=args.seeds)
    header = f"{'seed':>6} {'mode':>10} {'top1':>8} {'acc_pi6':>8} {'mederr':>8} {'aos':>8}"
    print(header)
    for side, mode in enumerate(result.modes):
        for seed, rep in zip(result.seeds, result.per_seed[side]):
            print(
                f"{seed:>6} {mode:>10} {rep.top1:>8.4f} {rep.acc_pi_6:>8.4f} "
                f"{rep.mederr_deg:>8.2f} {rep.aos:>8.4f}"
            )
    print("medians:")
    for side, mode in enumerate(result.modes):
        med = result.medians[side]
        print(
            f"{'':>6} {mode:>10} {med['top1']:>8.4f} {med['acc_pi_6']:>8.4f} "
            f"{med['mederr_deg']:>8.2f} {med['aos']:>8.4f}"
        )
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "compare-baseline": _cmd_compare_baseline,
}


def dispatch(argv):
    """Run one subcommand; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except _FAILURES as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
