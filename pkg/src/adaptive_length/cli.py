"""Command-line entry point: ``adaptive-length --config run.json --phase finetune --out runs/a``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from .config import PHASES, RunConfig, load_config
from .errors import ConfigError, MissingPrerequisiteError, NumericDomainError
from .pipeline import Pipeline, parse_grid

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


def _bool(text):
    lowered = text.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def build_parser():
    p = argparse.ArgumentParser(prog="adaptive-length", description="Adaptive length reduction pipeline.")
    p.add_argument("--config", help="JSON run configuration (defaults apply when omitted)")
    p.add_argument("--phase", action="append", choices=PHASES + ("all",), help="phase to run; repeatable")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--out", default="runs/default", help="artifact directory")
    p.add_argument("--include-cp-flops", type=_bool, help="count predictor FLOPs (true/false)")
    p.add_argument("--eta-override", type=float, help="debug: force every eta during inference")
    p.add_argument("--grid", help='Pareto sweep, e.g. "gamma=0.1;phi=0,0.001,0.01,0.1"')
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig().validate()
        if args.seed is not None:
            cfg.seed = args.seed
        if args.include_cp_flops is not None:
            cfg.eval = dataclasses.replace(cfg.eval, include_cp_flops=args.include_cp_flops)
        if args.eta_override is not None and not 0.0 <= args.eta_override < 1.0:
            raise ConfigError(f"--eta-override must lie in [0, 1), got {args.eta_override}")
        grid = parse_grid(args.grid) if args.grid else None
        phases = None if not args.phase or "all" in args.phase else args.phase
        Pipeline(cfg, args.out, args.eta_override, grid).run(phases)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingPrerequisiteError as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericDomainError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
