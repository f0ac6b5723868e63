"""Command line entry point: ``gardner <command> [options]``.

Exit codes: 0 success, 2 parameter error, 3 numerical non-convergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .harness import ExperimentSpec, run, write_record
from .replica import DivergingMinimumError, SaddleNonConvergence

EXIT_OK, EXIT_PARAM, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("gardner")


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--format", choices=("csv", "json"), default=d("csv"))
    p.add_argument("--out", metavar="PATH", default=d(None))
    p.add_argument("--workers", type=int, default=d(1))


def _model_flags(p, h=True):
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--k", type=float, default=0.0)
    if h:
        p.add_argument("--h", type=float, default=0.0)
        p.add_argument("--z", type=float, default=1.0)
        p.add_argument("--eps", type=float, default=0.05)


def _sim_flags(p):
    p.add_argument("--n", type=int, nargs="+", required=True, dest="N")
    p.add_argument("--instances", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gardner", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("capacity", help="alpha_c(k) on a grid of margins")
    p.add_argument("--k-min", type=float, default=0.0)
    p.add_argument("--k-max", type=float, default=2.0)
    p.add_argument("--k-step", type=float, default=0.5)

    p = sub.add_parser("free-energy", help="Gardner functional with optional soft-constraint columns")
    p.add_argument("--alpha", type=float, nargs="+", required=True)
    p.add_argument("--k", type=float, default=0.0)
    p.add_argument("--eps", type=float, nargs="*", default=[])

    p = sub.add_parser("saddle", help="regularized replica saddle point")
    _model_flags(p)

    p = sub.add_parser("simulate-volume", help="disorder-averaged log volume by hit-and-run")
    _model_flags(p, h=False)
    _sim_flags(p)
    p.add_argument("--M", type=float, default=10.0)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--steps", type=int, default=None, help="hit-and-run steps between samples (default 5N)")
    p.add_argument("--mode", choices=("binary", "gaussian"), default="binary")

    for name, text in (
        ("simulate-gibbs", "Gibbs order parameters against the saddle point"),
        ("factorization", "overlap factorization statistic against N"),
        ("consistency", "replica identities evaluated on Gibbs estimates"),
    ):
        p = sub.add_parser(name, help=text)
        _model_flags(p)
        _sim_flags(p)
        p.add_argument("--chains", type=int, default=4)
        p.add_argument("--sweeps", type=int, default=2000)
        p.add_argument("--burnin", type=int, default=500)
        p.add_argument("--mode", choices=("binary", "gaussian"), default="binary")

    for p in sub.choices.values():
        _global_flags(p, suppress=True)
    return parser


def spec_from_args(args: argparse.Namespace) -> ExperimentSpec:
    skip = {"command", "format", "out", "workers", "N", "instances", "seed", "M"}
    params = {k: v for k, v in vars(args).items() if k not in skip}
    if args.command == "capacity":
        params = {"k_min": args.k_min, "k_max": args.k_max, "k_step": args.k_step}
        if args.k_step <= 0 or args.k_max < args.k_min or args.k_min < 0:
            raise ValueError("need 0 <= k-min <= k-max and k-step > 0")
    return ExperimentSpec(
        command=args.command,
        params=params,
        N_list=list(getattr(args, "N", [])),
        n_instances=getattr(args, "instances", 30),
        seed=getattr(args, "seed", 0),
        M=getattr(args, "M", 10.0),
        output_path=args.out,
        format=args.format,
    )


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_PARAM
    try:
        if args.workers < 1:
            raise ValueError("--workers must be >= 1")
        spec = spec_from_args(args)
        record = run(spec, workers=args.workers)
    except (SaddleNonConvergence, DivergingMinimumError, ArithmeticError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARAM
    try:
        text = write_record(record, spec.format, spec.output_path)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    if not spec.output_path:
        sys.stdout.write(text)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
