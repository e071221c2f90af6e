"""Command-line entry point.

Subcommands::

    qudiff oracle-check --config cfg.json [--out DIR] [--seed N] [--threads N]
    qudiff make-dataset --config cfg.json [--set dataset.size=500] ...
    qudiff train        --config cfg.json [--dataset PATH] ...
    qudiff denoise-eval --config cfg.json [--dataset PATH] [--checkpoint PATH] ...
    qudiff report       --config cfg.json [--out DIR] [--force]

Exit codes: 0 success, 1 validation problem (bad config, missing files),
2 numerical-check failure or divergence.
"""

from __future__ import annotations

import argparse
import sys

from .pipeline import (
    EXIT_NUMERICAL,
    EXIT_VALIDATION,
    ConfigError,
    cmd_denoise_eval,
    cmd_make_dataset,
    cmd_oracle_check,
    cmd_report,
    cmd_train,
    load_config,
)
from .reverse import ReverseDivergenceError
from .score import TrainingDivergedError
from .unravel import SdeDivergenceError

__all__ = ["build_parser", "main"]


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", required=True, help="path to the JSON experiment config")
    sub.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config entry by dotted path, e.g. --set train.steps=200",
    )
    sub.add_argument("--out", default=None, help="output directory (default: config out_dir)")
    sub.add_argument("--seed", type=int, default=None, help="override the master seed")
    sub.add_argument("--threads", type=int, default=None, help="worker threads for ensembles")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qudiff",
        description="Simulate noisy qubit registers and denoise them with score-based reversal.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("oracle-check", help="run closed-form self-checks on the configured system")
    _add_common(p)

    p = subs.add_parser("make-dataset", help="sample Haar-random states into a dataset file")
    _add_common(p)

    p = subs.add_parser("train", help="fit the score network on a dataset")
    _add_common(p)
    p.add_argument("--dataset", default=None, help="dataset path (default: OUT/dataset.json)")

    p = subs.add_parser("denoise-eval", help="corrupt held-out states, denoise, and score them")
    _add_common(p)
    p.add_argument("--dataset", default=None, help="dataset path (default: OUT/dataset.json)")
    p.add_argument(
        "--checkpoint", default=None, help="checkpoint path (default: OUT/checkpoint.qsck)"
    )

    p = subs.add_parser("report", help="aggregate metric files from runs under OUT")
    _add_common(p)
    p.add_argument(
        "--force", action="store_true", help="aggregate even if config digests disagree"
    )

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(
            args.config,
            overrides=args.overrides,
            seed=args.seed,
            out_dir=args.out,
            threads=args.threads,
        )
        if args.command == "oracle-check":
            return cmd_oracle_check(cfg, args.out)
        if args.command == "make-dataset":
            return cmd_make_dataset(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.out, dataset_path=args.dataset)
        if args.command == "denoise-eval":
            return cmd_denoise_eval(
                cfg, args.out, dataset_path=args.dataset, checkpoint_path=args.checkpoint
            )
        if args.command == "report":
            return cmd_report(cfg, args.out, force=args.force)
        raise AssertionError(f"unhandled command {args.command!r}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (SdeDivergenceError, TrainingDivergedError, ReverseDivergenceError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
