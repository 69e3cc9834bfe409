"""Command line interface: one subcommand per pipeline stage plus ``all``.

Exit codes: 0 success, 2 configuration error, 3 stale or missing upstream
artifacts, 4 numeric failure (non-convergence, degenerate statistics, empty
cluster selection), 5 malformed data.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from .config import load_config
from .errors import (ConfigError, DataError, NumericError, SelectionError,
                     SlidesurvError, StaleInputError, UntrainableClusterError)
from .pipeline import STAGES, run_all, run_stage

_EXIT_CODES = [
    (ConfigError, 2),
    (StaleInputError, 3),
    (NumericError, 4),
    (SelectionError, 4),
    (UntrainableClusterError, 4),
    (DataError, 5),
    (SlidesurvError, 1),
]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slidesurv",
        description="Whole-slide survival pipeline: patch sampling, "
                    "clustering, per-cluster risk networks, feature "
                    "aggregation, and penalized Cox modeling.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ["all"]:
        stage_parser = sub.add_parser(
            name, help=f"run the {name} stage" if name != "all"
            else "run every stage in order")
        stage_parser.add_argument("--config", required=True,
                                  help="path to the pipeline YAML config")
        stage_parser.add_argument("--stage-seed", type=int, default=None,
                                  help="override the derived per-stage seed")
        stage_parser.add_argument("--jobs", type=int, default=None,
                                  help="parallelism cap (stages are currently "
                                       "single-threaded)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
        if args.jobs is not None:
            config = dataclasses.replace(config, jobs=args.jobs)
        if args.command == "all":
            statuses = run_all(config, args.stage_seed)
        else:
            statuses = {args.command: run_stage(args.command, config,
                                                args.stage_seed)}
    except SlidesurvError as exc:
        code = next(c for cls, c in _EXIT_CODES if isinstance(exc, cls))
        print(f"error: {exc}", file=sys.stderr)
        return code
    for stage, status in statuses.items():
        print(f"{stage}: {status}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
