"""Command-line interface: study, oracle, balance, timing and plot commands."""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .harness import (
    ExperimentConfig,
    HarnessError,
    emit_plots,
    run_balance_sweep,
    run_convergence_study,
    run_timing_study,
)
from .oracle import OracleConfig, quadrature_solve
from .problems import problem_by_name
from .schemes import scheme_by_name


def _parse_list(text, cast=float):
    return tuple(cast(tok) for tok in str(text).split(",") if tok.strip())


def _add_common(parser):
    parser.add_argument("--problem", default="bm-cos")
    parser.add_argument("--scheme", default="cn",
                        help="scheme name or comma list (euler_implicit, "
                             "euler_explicit, theta, cn, rk2, rk3)")
    parser.add_argument("--steps", default="2,4,8,16", help="comma list of N")
    parser.add_argument("--batch", type=int, default=1000)
    parser.add_argument("--ntest", type=int, default=10)
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--out", default="out")
    parser.add_argument("--theta", type=float, default=0.5)
    parser.add_argument("--c2", type=float, default=0.5)
    parser.add_argument("--c3", type=float, default=0.7)
    parser.add_argument("--balance", type=float, default=None,
                        help="override the correction-penalty weight")
    parser.add_argument("--cn-plain", action="store_true",
                        help="disable the trapezoidal control variate")
    parser.add_argument("--initial-lr", type=float, default=1e-2)
    parser.add_argument("--warm-lr", type=float, default=3e-3)
    parser.add_argument("--stop-lr", type=float, default=None)
    parser.add_argument("--workers", type=int, default=0,
                        help="0 reads the BSDERK_WORKERS environment variable")
    parser.add_argument("--config", default=None,
                        help="JSON file with ExperimentConfig fields; CLI flags win")


def _config_from_args(args) -> ExperimentConfig:
    base = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            base = json.load(fh)
    cli = {
        "problem": args.problem,
        "schemes": _parse_list(args.scheme, str),
        "steps": _parse_list(args.steps, int),
        "batch": args.batch,
        "ntest": args.ntest,
        "seed": args.seed,
        "out_dir": args.out,
        "theta": args.theta,
        "c2": args.c2,
        "c3": args.c3,
        "balance": args.balance,
        "cn_plain": args.cn_plain,
        "initial_lr": args.initial_lr,
        "warm_lr": args.warm_lr,
        "stop_lr": args.stop_lr,
        "workers": args.workers,
    }
    base.update(cli)
    return ExperimentConfig(**base)


def _cmd_study(args) -> int:
    config = _config_from_args(args)
    result = run_convergence_study(config)
    for scheme, info in result.summary.items():
        eps = ", ".join(f"N={n}: {e:.4g}" for n, e in zip(info["N"], info["eps"]))
        print(f"{scheme}: {eps} | fitted order {info['order']:.3g}")
    print(f"wrote {result.paths['results']}")
    return 0


def _cmd_timing(args) -> int:
    config = _config_from_args(args)
    result = run_timing_study(config)
    for scheme, info in result.summary.items():
        secs = ", ".join(f"N={n}: {s:.1f}s" for n, s in zip(info["N"], info["seconds"]))
        print(f"{scheme}: {secs}")
    print(f"wrote {result.paths['timing_study']}")
    return 0


def _cmd_balance(args) -> int:
    config = _config_from_args(args)
    balances = _parse_list(args.balances, float)
    result = run_balance_sweep(config, balances)
    for bal, info in result.summary.items():
        print(f"balance {bal}: eps={info['eps']:.4g}")
    print(f"wrote {result.paths['balance_sweep']}")
    return 0


def _cmd_oracle(args) -> int:
    problem = problem_by_name(args.problem)
    scheme = scheme_by_name(args.scheme, theta=args.theta, c2=args.c2, c3=args.c3)
    steps = _parse_list(args.steps, int)
    config = OracleConfig(n_nodes=args.nodes, gh_order=args.gh_order)
    if not problem.has_exact:
        print("problem has no exact solution", file=sys.stderr)
        return 2
    exact = problem.exact_y0()
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    rows = []
    errs, ns = [], []
    for n in steps:
        res = quadrature_solve(problem, scheme.tableau, n, config)
        err = abs(res.y0 - exact)
        ns.append(n)
        errs.append(err)
        if len(ns) >= 2 and all(e > 0 for e in errs):
            slope = float(-np.polyfit(np.log2(ns), np.log2(errs), 1)[0])
        else:
            slope = float("nan")
        rows.append((scheme.name, n, f"{res.y0:.12g}", f"{err:.6g}", f"{slope:.4f}"))
        print(f"{scheme.name} N={n}: y0={res.y0:.8f} abs_error={err:.3g} "
              f"running_slope={slope:.3f}")
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scheme", "N", "y0", "abs_error", "slope_running"])
        writer.writerows(rows)
    print(f"wrote {args.out}")
    return 0


def _cmd_plot(args) -> int:
    written = emit_plots(args.inputs, args.out)
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bsderk",
        description="High-order backward time stepping for BSDEs with "
                    "neural-network regression stages",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_study = sub.add_parser("study", help="convergence study over step counts")
    _add_common(p_study)
    p_study.set_defaults(func=_cmd_study)

    p_timing = sub.add_parser("timing", help="wall-time study over step counts")
    _add_common(p_timing)
    p_timing.set_defaults(func=_cmd_timing)

    p_bal = sub.add_parser("balance", help="penalty-weight sweep for cn")
    _add_common(p_bal)
    p_bal.add_argument("--balances", default="0.5,1,1.3333333333,2,4,8,16,32")
    p_bal.set_defaults(func=_cmd_balance)

    p_oracle = sub.add_parser("oracle",
                              help="deterministic 1-d discrete-time error table")
    p_oracle.add_argument("--problem", default="cos-1d")
    p_oracle.add_argument("--scheme", default="cn")
    p_oracle.add_argument("--steps", default="4,8,16,32,64")
    p_oracle.add_argument("--theta", type=float, default=0.5)
    p_oracle.add_argument("--c2", type=float, default=0.5)
    p_oracle.add_argument("--c3", type=float, default=0.7)
    p_oracle.add_argument("--nodes", type=int, default=400)
    p_oracle.add_argument("--gh-order", type=int, default=32)
    p_oracle.add_argument("--out", default="oracle_errors.csv")
    p_oracle.set_defaults(func=_cmd_oracle)

    p_plot = sub.add_parser("plot", help="render SVG charts from study CSVs")
    p_plot.add_argument("inputs", nargs="+")
    p_plot.add_argument("--out", default="plots")
    p_plot.set_defaults(func=_cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (HarnessError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
