"""Command line benchmark harness.

Example::

    mgforge-bench --dim 3 --size 4 --refine 2 --degree 3 --ranks 1,2,4 --csv times.csv
"""
from __future__ import annotations

import argparse
import logging
import sys

from ..errors import MgforgeError, TeamAborted
from ..solver.options import help_text
from .poisson import BenchConfig
from .report import emit_report, write_svg
from .sweep import strong_scaling


def _ranks(text):
    try:
        values = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad rank list {text!r}") from None
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError(f"bad rank list {text!r}")
    return values


def build_parser():
    p = argparse.ArgumentParser(prog="mgforge-bench",
                                description="Poisson benchmark with geometric multigrid on a thread team.")
    p.add_argument("--dim", type=int, default=3, choices=(2, 3))
    p.add_argument("--size", type=int, default=4, metavar="N", help="coarse mesh resolution")
    p.add_argument("--refine", type=int, default=2, metavar="L", help="number of refinements")
    p.add_argument("--degree", type=int, default=3, metavar="k")
    p.add_argument("--ranks", type=_ranks, default=[1], metavar="R[,R...]")
    p.add_argument("--telescope-factor", type=int, default=None, metavar="r")
    p.add_argument("--options", default=None, metavar="FILE", help="solver options file (key value lines)")
    p.add_argument("--a", type=float, default=1.0)
    p.add_argument("--b", type=float, default=2.0)
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--csv", default=None, metavar="PATH")
    p.add_argument("--svg", default=None, metavar="PATH")
    p.add_argument("--cg-reference", action="store_true",
                   help="also solve with CG + V-cycle multigrid to tight tolerance")
    p.add_argument("--help-options", action="store_true", help="list the solver option keys and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.help_options:
        print(help_text())
        return 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        for R in args.ranks:
            BenchConfig(args.dim, args.size, args.refine, args.degree, args.a, args.b, R,
                        args.telescope_factor, args.options, args.csv, args.reps)
        cfg = BenchConfig(args.dim, args.size, args.refine, args.degree, args.a, args.b, args.ranks[0],
                          args.telescope_factor, args.options, args.csv, args.reps, args.cg_reference)
        sweep = strong_scaling(cfg, args.ranks)
        print("ranks,dofs,dofs_per_rank,iterations,l2_error,max_error,total_solve_s"
              + (",cg_iterations,cg_l2_error" if args.cg_reference else ""))
        for R, res in sweep.runs:
            total = res.report.stage("total_solve")
            line = (f"{R},{res.ndofs},{res.dofs_per_rank:.2f},{res.iterations},{res.l2_error:.6e},"
                    f"{res.max_error:.6e},{total.seconds if total else float('nan'):.4f}")
            if args.cg_reference:
                line += f",{res.cg_iterations},{res.cg_l2_error:.6e}"
            print(line)
        if sweep.fit is not None:
            print(f"amdahl: s={sweep.fit.s:.6g} p={sweep.fit.p:.6g} residual={sweep.fit.residual:.3g}")
        if args.csv:
            emit_report(sweep.reports, sweep.fit, args.csv)
        if args.svg:
            write_svg(sweep.reports, args.svg)
    except TeamAborted as exc:
        print(f"mgforge-bench: error: {exc}", file=sys.stderr)
        return 1
    except (MgforgeError, OSError, ValueError) as exc:
        print(f"mgforge-bench: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
