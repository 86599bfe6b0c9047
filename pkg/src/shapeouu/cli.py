"""Command-line entry point.

Usage: sdk generate|reduce|train|optimize|evaluate|bench --config PATH
[--seed N] [--out DIR] plus ``sdk export ARRAY [--out CSV]`` for text
interop.  Exit codes: 0 success, 2 invalid configuration, 3 solver
failure, 4 inadmissible design.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import arrays, config as config_mod, fem, ouu, pipeline, shape

EXIT_OK = 0
EXIT_BAD_CONFIG = 2
EXIT_SOLVER = 3
EXIT_INADMISSIBLE = 4

_STAGES = {
    "generate": pipeline.cmd_generate,
    "reduce": pipeline.cmd_reduce,
    "train": pipeline.cmd_train,
    "optimize": pipeline.cmd_optimize,
    "evaluate": pipeline.cmd_evaluate,
    "bench": pipeline.cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sdk",
        description="Reference-domain surrogate pipeline for risk-averse shape design",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _STAGES:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", required=True, help="run configuration file")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--out", default="out", help="output directory")
        if name == "train":
            p.add_argument("--replicate", type=int, default=1,
                           help="number of training replicates")
    exp = sub.add_parser("export", help="convert a binary array file to CSV")
    exp.add_argument("array", help="path to a .sdk1 array file")
    exp.add_argument("--out", default=None, help="CSV destination (default: alongside)")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)

    if args.command == "export":
        target = args.out or str(Path(args.array).with_suffix(".export.csv"))
        try:
            arrays.export_csv(args.array, target)
        except (ValueError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_BAD_CONFIG
        print(target)
        return EXIT_OK

    try:
        rc = config_mod.load_config(args.config)
        if args.seed is not None:
            rc = dataclasses.replace(rc, seed=args.seed)
            rc.validate()
    except (ValueError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG

    stage = _STAGES[args.command]
    kwargs = {}
    if args.command == "train":
        kwargs["replicates"] = args.replicate
    try:
        stage(rc, args.out, **kwargs)
    except (shape.DegenerateDeformation, ouu.InadmissibleDesign) as exc:
        print(f"inadmissible design: {exc}", file=sys.stderr)
        return EXIT_INADMISSIBLE
    except fem.SolverFailure as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
