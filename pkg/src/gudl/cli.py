"""Command-line entry point: ``gudl <subcommand> [--config PATH] [--seed U64] [--out DIR] [--snr-db LIST]``.

Exit codes: 0 success, 2 configuration or validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .core import ValidationError
from .experiments import ExperimentConfig, run
from .training import NoConvergenceError, TrainingDivergedError

log = logging.getLogger("gudl")

SUBCOMMANDS = {
    "generate": "generate",
    "train": "train",
    "evaluate": "evaluate",
    "sweep": "nmse_sweep",
    "theory": "theory",
    "sgf": "sgf_curves",
    "assumptions": "assumptions",
    "sparsity": "sparsity_check",
    "gsure-check": "gsure_unbiasedness",
}

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _u64(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gudl", description="GSURE-trained deep-equilibrium channel estimation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, tag in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=f"run the {tag} experiment")
        p.add_argument("--config", help="INI experiment file")
        p.add_argument("--seed", type=_u64)
        p.add_argument("--out", help="output directory")
        p.add_argument("--snr-db", help="comma separated SNR grid in dB")
    return parser


def config_from_args(args) -> ExperimentConfig:
    overrides = {"tag": SUBCOMMANDS[args.command], "seed": args.seed, "out": args.out, "snr_db": args.snr_db}
    if args.config:
        return ExperimentConfig.from_file(args.config, **overrides)
    return ExperimentConfig.from_mapping({k: v for k, v in overrides.items() if v is not None})


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = config_from_args(args)
        run(cfg)
    except (ValidationError, OSError) as exc:
        print(f"gudl: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergedError, NoConvergenceError, FloatingPointError, ArithmeticError) as exc:
        print(f"gudl: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    log.info("wrote results to %s", cfg.out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
