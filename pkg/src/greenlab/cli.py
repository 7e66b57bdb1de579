"""Command line entry point.

    greenlab SUBCOMMAND --config PATH [--out DIR] [--workers N] [--seed N]
                        [--strict] [--no-timestamps]

Subcommands name one experiment (check, solve, green, fit, davies,
degiorgi, elliptic), the whole configured list (all), or a parameter sweep
(sweep).  A single experiment pulls in its prerequisites automatically.

Exit codes: 0 every executed check passed; 1 the run completed but some
check failed; 2 the config violates the schema; 3 the structural
hypotheses failed under --strict; 4 a solve aborted numerically.
"""

import argparse
import sys

from .config import ConfigError, ensure_selectable, load_config
from .runner import (EXPERIMENTS, HypothesisFailure, resolve_selection, run,
                     run_sweep)
from .solver import NumericalAbort

_SUBCOMMANDS = EXPERIMENTS + ("sweep", "all")


def _build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", required=True, metavar="PATH",
                        help="JSON experiment configuration")
    shared.add_argument("--out", metavar="DIR",
                        help="output directory (default: the config's "
                        "'output' field, else ./out)")
    shared.add_argument("--workers", type=int, metavar="N",
                        help="concurrent sweep runs (default from config)")
    shared.add_argument("--seed", type=int, metavar="N",
                        help="seed for randomized probes "
                        "(default from config)")
    shared.add_argument("--strict", action="store_true",
                        help="abort with exit 3 when the structural "
                        "hypotheses fail")
    shared.add_argument("--no-timestamps", action="store_true",
                        help="omit wall times so outputs are byte-stable")

    parser = argparse.ArgumentParser(
        prog="greenlab",
        description="kernel experiments for parabolic operators with "
                    "critical lower order terms")
    subs = parser.add_subparsers(dest="subcommand", required=True)
    descriptions = {
        "check": "structural hypotheses of the coefficient field",
        "solve": "Cauchy solve plus the energy inequality",
        "green": "kernel column from the configured pole",
        "fit": "Gaussian envelope fit of the kernel",
        "davies": "exponentially weighted energy envelopes",
        "degiorgi": "level-set iteration trace",
        "elliptic": "time-integrated kernel on a 3-d grid",
        "sweep": "one run per value of the configured sweep axis",
        "all": "every experiment the config selects",
    }
    for name in _SUBCOMMANDS:
        subs.add_parser(name, parents=[shared], help=descriptions[name])
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.subcommand == "sweep":
            if "sweep" not in cfg.raw:
                raise ConfigError("sweep: the config has no sweep section")
        else:
            selection = resolve_selection(cfg, args.subcommand)
            ensure_selectable(cfg, selection)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    out_dir = args.out or cfg.output
    try:
        if args.subcommand == "sweep":
            result = run_sweep(cfg, out_dir, seed=args.seed,
                               workers=args.workers, strict=args.strict,
                               timestamps=not args.no_timestamps)
        else:
            result = run(cfg, selection, out_dir, seed=args.seed,
                         strict=args.strict,
                         timestamps=not args.no_timestamps)
    except HypothesisFailure as exc:
        print(f"hypothesis failure: {exc}", file=sys.stderr)
        return 3
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 4

    summary = "pass" if result.passed else "FAIL"
    print(f"{args.subcommand}: {summary} -> {result.out_dir}")
    return 0 if result.passed else 1
