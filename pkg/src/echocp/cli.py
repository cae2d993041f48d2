"""Command line driver: ``echocp run``, ``echocp compare`` and ``echocp report``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import __version__
from .bench import bench_nfz5
from .config import ConfigError, apply_overrides, load_config
from .ech import ADAPTIVE, FIXED, PRACTICAL, STRICT
from .reports import (ECH, STANDARD, comparison_table, emit_reports, history_table, load_record,
                      run_comparison, run_single)

ECH_FLAGS = ("zeta", "beta", "beta_mode", "eps_c_tol", "eta_tol", "max_mr_iterations", "afp_policy",
             "samples_per_interval", "penalty")
SOLVER_FLAGS = ("tol_kkt", "tol_primal", "max_iter")
PROBLEM_FLAGS = ("tf", "initial_intervals")


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="INI file with [problem], [ech], [solver], [refine] sections")
    p.add_argument("--out", default="echocp_out", help="output directory (default: %(default)s)")
    g = p.add_argument_group("constraint handling")
    g.add_argument("--zeta", type=float, help="segment-mean threshold for multiplier activity")
    g.add_argument("--beta", type=float, help="buffer around activation intervals [s]")
    g.add_argument("--beta-mode", choices=(FIXED, ADAPTIVE))
    g.add_argument("--eps-c-tol", type=float, help="constraint violation tolerance")
    g.add_argument("--eta-tol", type=float, help="local dynamics error tolerance")
    g.add_argument("--max-mr-iterations", type=int)
    g.add_argument("--afp-policy", choices=(PRACTICAL, STRICT))
    g.add_argument("--samples-per-interval", type=int)
    g.add_argument("--penalty", type=float, help="changepoint penalty (default: 0.1 * length * variance)")
    g = p.add_argument_group("solver")
    g.add_argument("--tol-kkt", type=float)
    g.add_argument("--tol-primal", type=float)
    g.add_argument("--max-iter", type=int)
    g = p.add_argument_group("problem")
    g.add_argument("--tf", type=float, help="final time [s]")
    g.add_argument("--initial-intervals", type=int, help="intervals of the first mesh")
    p.add_argument("--recompute-repeats", type=int, default=3,
                   help="re-solves timed for the re-computation time (0 skips)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="echocp", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="-v for progress, -vv for solver iteration logs")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run one pipeline on the five-zone benchmark")
    _add_common(p)
    p.add_argument("--pipeline", choices=(ECH, STANDARD), default=ECH)
    p = sub.add_parser("compare", help="run the standard and ECH pipelines and compare")
    _add_common(p)
    p = sub.add_parser("report", help="re-emit reports from a saved run record")
    p.add_argument("record", help="run_record.json written by run/compare")
    p.add_argument("--out", default="echocp_out")
    return parser


def _setup(args):
    spec, cfg = load_config(args.config)
    ech_kw = {k: getattr(args, k) for k in ECH_FLAGS if getattr(args, k) is not None}
    solver_kw = {k: getattr(args, k) for k in SOLVER_FLAGS if getattr(args, k) is not None}
    cfg = apply_overrides(cfg, ech_kw, solver_kw)
    prob_kw = {k: getattr(args, k) for k in PROBLEM_FLAGS if getattr(args, k) is not None}
    prob, mesh, spec = bench_nfz5(prob_kw, spec)
    return prob, mesh, spec, cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(message)s")
    try:
        if args.command == "report":
            report = load_record(args.record)
        else:
            prob, mesh, spec, cfg = _setup(args)
            if args.command == "run":
                report = run_single(prob, mesh, cfg, args.pipeline, spec, args.recompute_repeats)
            else:
                report = run_comparison(prob, mesh, cfg, spec, args.recompute_repeats)
        written = emit_reports(report, args.out)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"echocp: error: {exc}", file=sys.stderr)
        return 2
    horizon = (report.problem.get("t0", 0.0), report.problem.get("tf", 1.0))
    main_pipe = ECH if ECH in report.pipelines else next(iter(report.pipelines))
    print(history_table(report.pipelines[main_pipe], horizon))
    print(comparison_table(report))
    failed = [p for p in report.pipelines.values() if p.status == "failed"]
    for p in failed:
        print(f"{p.name} pipeline failed: {p.message}", file=sys.stderr)
    if report.objectives_agree is False:
        print(f"objectives differ by {report.objective_rel_diff:.3e} (relative)", file=sys.stderr)
    print(f"reports written to {written['record'].parent}")
    return 1 if failed or report.objectives_agree is False else 0


if __name__ == "__main__":
    sys.exit(main())
