"""Command-line entry points.

Each stage subcommand executes one pipeline stage from a JSON experiment
configuration; `run` executes every configured stage in dependency order.
`gradcheck` runs the randomized gradient/adjoint/QC suite and exits nonzero
on any failure.
"""

from __future__ import annotations

import argparse
import sys

from .errors import DeskvarError
from .gradcheck import run_suite
from .pipeline import STAGES, run_experiment


def _add_stage_parsers(sub):
    for stage in STAGES:
        p = sub.add_parser(stage, help=f"run only the {stage} stage")
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.set_defaults(stage=stage)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="deskvar",
        description="Desk-scale variational DA and forecasting testbed",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    _add_stage_parsers(sub)

    p_run = sub.add_parser("run", help="run the full configured pipeline")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--stages", nargs="*", default=None,
                       help="optional subset of stages to run")

    p_gc = sub.add_parser("gradcheck", help="gradient/adjoint/QC check suite")
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.add_argument("--cases", type=int, default=20)
    p_gc.add_argument("--pairs", type=int, default=100)

    args = parser.parse_args(argv)

    try:
        if args.command == "gradcheck":
            rows = run_suite(seed=args.seed, n_cases=args.cases, n_pairs=args.pairs)
            width = max(len(r.name) for r in rows)
            failed = 0
            for r in rows:
                status = "PASS" if r.ok else "FAIL"
                print(f"{r.name:<{width}}  {status}  {r.detail}")
                failed += 0 if r.ok else 1
            print(f"{len(rows) - failed}/{len(rows)} checks passed")
            return 1 if failed else 0

        if args.command == "run":
            run_experiment(args.config, stages=args.stages,
                           progress=lambda m: print(m, flush=True))
            return 0

        run_experiment(args.config, stages=[args.stage],
                       progress=lambda m: print(m, flush=True))
        return 0
    except DeskvarError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
