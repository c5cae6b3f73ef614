"""
cli.py: Command-line entry point

Usage:
    python cli.py run configs/desk_biml.yaml [--output-dir runs/biml]
    python cli.py compare runs/full runs/biml runs/uponly [--xlsx comparison.xlsx]
    python cli.py verify runs/biml
    python cli.py fit-curve --m 100 [--out curve_fits.txt]
    python cli.py audit-estimator --m 10 --m 50 --m 100

Exit codes: 0 success, 1 failure or failed check suite, 2 usage / config error.

Version: 1.0.0
Last Updated: 2026-10-19
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from errors import BiflError
from experiment import audit_estimator, compare_runs, format_comparison, run_experiment, verify_run
from mlpu import compare_with_reference, fit_curve, save_curve_fits
from run_config import load_config

logger = logging.getLogger("cli")

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(name)s - %(message)s"


# ============================================================
# Subcommands
# ============================================================

def cmd_run(args) -> int:
    config = load_config(args.config)
    outcome = run_experiment(config, Path(args.output_dir) if args.output_dir else None)
    if not outcome.passed:
        logger.error(f"{outcome.kind}: check suite failed, see {outcome.run_dir}")
        return 1
    print(f"Saved: {outcome.run_dir}")
    return 0


def cmd_compare(args) -> int:
    rows = compare_runs(args.run_dirs)
    print(format_comparison(rows))
    if args.xlsx:
        from report_excel import ComparisonWorkbook
        ComparisonWorkbook(args.run_dirs, rows).generate(args.xlsx)
        print(f"Saved: {args.xlsx}")
    return 0


def cmd_verify(args) -> int:
    report = verify_run(args.run_dir)
    print(("OK  " if report.matches else "FAIL ") + report.message)
    return 0 if report.matches else 1


def cmd_fit_curve(args) -> int:
    fits = []
    for M in args.m:
        fit = fit_curve(M, own_vote=not args.no_own_vote)
        fits.append(fit)
        flag = "" if fit.within_tolerance else "  (above tolerance)"
        print(f"M={fit.M:g}  a1={fit.a1:.4f} a2={fit.a2:.4f} a3={fit.a3:.4f}  "
              f"a4={fit.a4:.4f} a5={fit.a5:.4f} a6={fit.a6:.4f}  "
              f"max_err={fit.max_fit_error:.4f}{flag}")
        if M == 100 and fit.own_vote:
            dev = compare_with_reference(fit)
            print("  vs reference: " + ", ".join(f"{k} {100 * v:.1f}%" for k, v in dev.items()))
    if args.out:
        save_curve_fits(Path(args.out), fits)
        print(f"Saved: {args.out}")
    return 0


def cmd_audit_estimator(args) -> int:
    out_dir = Path(args.output_dir) if args.output_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    report = audit_estimator(args.m, args.grid_step, args.samples, args.m if args.fit else [],
                             args.seed, out_dir)
    oracle, contraction = report["oracle"], report["contraction"]
    print(f"oracle: {oracle['cases']} tallies, max |u_solve - u_grid| = {oracle['max_abs_diff']:.2e} "
          f"(tolerance {oracle['tolerance']:g})")
    print(f"contraction: {contraction['same_sign_violations']} same-sign violations in "
          f"{contraction['same_sign_samples']} samples "
          f"({contraction['all_violations']} opposite-sign samples exceed 1)")
    for fit in report["fits"]:
        print(f"fit M={fit['M']:g}: max_err={fit['max_fit_error']:.4f} "
              f"within_tolerance={fit['within_tolerance']}")
    print("PASS" if report["passed"] else "FAIL")
    return 0 if report["passed"] else 1


# ============================================================
# Parser
# ============================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cli.py",
                                     description="Federated binary network simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run every seed of a config")
    p.add_argument("config")
    p.add_argument("--output-dir", help="overrides output_dir of the config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="final accuracy and bits per run directory")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--xlsx", help="also write an Excel workbook")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("verify", help="recompute summary.csv from the per-seed CSVs")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("fit-curve", help="fit the ML-PU log curve for M clients")
    p.add_argument("--m", type=float, action="append", required=True)
    p.add_argument("--no-own-vote", action="store_true",
                   help="fit for a client whose vote is not in the tally")
    p.add_argument("--out", help="write the curve-fit cache file")
    p.set_defaults(func=cmd_fit_curve)

    p = sub.add_parser("audit-estimator", help="oracle sweep and contraction audit")
    p.add_argument("--m", type=float, action="append", required=True)
    p.add_argument("--grid-step", type=float, default=1e-4)
    p.add_argument("--samples", type=int, default=100000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fit", action="store_true", help="also fit the curve for each M")
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_audit_estimator)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT)
    try:
        return args.func(args)
    except BiflError as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
