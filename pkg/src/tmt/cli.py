"""``tmt <experiment> --config <path> [--out <dir>] [--threads k] [--seed s]``.

Exit codes: 0 all checks pass, 1 an invariant check failed, 2 usage or
configuration error, 3 solver error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .decomposition import SolverError
from .experiments import EXPERIMENTS, run_experiment
from .geometry import ShootingError, TrappedGeodesicError
from .io import ParseError
from .tube_cascade import ChartFoldError

EXIT_OK, EXIT_INVARIANT, EXIT_USAGE, EXIT_SOLVER = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tmt", description="Geodesic moment transforms of symmetric tensor fields.")
    p.add_argument("experiment", choices=sorted(EXPERIMENTS))
    p.add_argument("--config", required=True, help="JSON experiment configuration")
    p.add_argument("--out", help="output directory (default: $TMT_OUT, then the config's 'out', then ./tmt_out)")
    p.add_argument("--threads", type=int, default=1, help="worker cap for geodesic tracing")
    p.add_argument("--seed", type=int, help="override the configured RNG seed")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("tmt: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.model_copy(update={"seed": args.seed})
    except ConfigError as exc:
        print(f"tmt: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out or os.environ.get("TMT_OUT") or cfg.out or "tmt_out")
    try:
        report = run_experiment(cfg, args.experiment, out, args.threads)
    except (SolverError, ShootingError, TrappedGeodesicError, ChartFoldError) as exc:
        print(f"tmt: solver error in {args.experiment}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ValueError, ParseError) as exc:
        print(f"tmt: configuration error in {args.experiment}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    for c in report.checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name} {c.value:.6g} (threshold {c.threshold:.3g})")
    print(f"outputs in {out}")
    return EXIT_OK if report.passed else EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
