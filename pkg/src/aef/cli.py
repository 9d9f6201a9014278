"""Command-line entry point.

Exit codes: 0 success, 1 configuration or input error, 2 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness
from .config import ConfigError, default_config, load_config
from .data import FormatError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aef", description="Universal perturbations against a surrogate ensemble.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="config file; defaults to the built-in 4-model setup")
        p.add_argument("--out", help="output directory (overrides [output] dir)")
        p.add_argument("--seed", type=int, help="override the run and surrogate seed")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("train", help="optimize a perturbation")).add_argument(
        "--weighting", choices=("adaptive", "static"), default="adaptive")
    common(sub.add_parser("eval", help="score a perturbation file")).add_argument(
        "--perturbation", required=True)
    p = common(sub.add_parser("sweep", help="train+eval for each value of one hyperparameter"))
    p.add_argument("--param", required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    common(sub.add_parser("holdout", help="leave-one-out transfer")).add_argument(
        "--exclude", help="model id to hold out; all folds when omitted")
    common(sub.add_parser("ablate", help="adaptive vs static weighting"))
    return ap


def run(args) -> dict:
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.command == "train":
        return harness.cmd_train(cfg, args.out, args.weighting)
    if args.command == "eval":
        return harness.cmd_eval(cfg, args.perturbation, args.out)
    if args.command == "sweep":
        try:
            values = [float(v) for v in args.values.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"--values: {exc}") from exc
        return harness.cmd_sweep(cfg, args.param, values, args.out)
    if args.command == "holdout":
        return harness.cmd_holdout(cfg, args.exclude, args.out)
    return harness.cmd_ablate(cfg, args.out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run(args)
    except (ConfigError, FormatError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    brief = {k: v for k, v in result.items() if k not in ("weights", "ensemble", "config")}
    print(json.dumps(brief, default=str, sort_keys=True, indent=1))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
