"""Experiment orchestration: convergence, timing and balance studies.

A study is a grid of independent cells (scheme, step count, run); every cell
owns its RNG stream derived from the base seed plus the run index, so
results are bit-identical no matter how cells are scheduled across workers.
Result CSVs (``results.csv``, ``summary.csv``) are deterministic; wall-clock
measurements go to a separate ``timings.csv``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .problems import problem_by_name
from .schemes import backward_solve, default_schedule, scheme_by_name

WORKERS_ENV = "BSDERK_WORKERS"


class HarnessError(ValueError):
    """Invalid experiment configuration or malformed inputs."""


@dataclass
class ExperimentConfig:
    problem: str = "bm-cos"
    schemes: tuple = ("cn",)
    steps: tuple = (2, 4, 8, 16)
    batch: int = 1000
    ntest: int = 10
    seed: int = 42
    out_dir: str = "out"
    theta: float = 0.5
    c2: float = 0.5
    c3: float = 0.7
    balance: Optional[float] = None
    cn_plain: bool = False
    initial_lr: float = 1e-2
    warm_lr: float = 3e-3
    stop_lr: Optional[float] = None  # None: scheme-dependent default
    workers: int = 0  # 0: read the worker-count environment variable

    def __post_init__(self):
        if isinstance(self.schemes, str):
            self.schemes = tuple(s.strip() for s in self.schemes.split(",") if s.strip())
        self.schemes = tuple(self.schemes)
        self.steps = tuple(int(n) for n in self.steps)
        if self.ntest < 1:
            raise HarnessError("ntest must be >= 1")
        if not self.steps:
            raise HarnessError("steps must not be empty")
        if any(n < 1 for n in self.steps):
            raise HarnessError("step counts must be >= 1")

    def effective_workers(self) -> int:
        if self.workers > 0:
            return self.workers
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "ExperimentConfig":
        return ExperimentConfig(**json.loads(text))

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()[:16]


def _cell_payload(config: ExperimentConfig, scheme: str, n_steps: int, run: int) -> dict:
    return {
        "problem": config.problem,
        "scheme": scheme,
        "n_steps": n_steps,
        "run": run,
        "seed": config.seed + run,
        "batch": config.batch,
        "theta": config.theta,
        "c2": config.c2,
        "c3": config.c3,
        "balance": config.balance,
        "cn_plain": config.cn_plain,
        "initial_lr": config.initial_lr,
        "warm_lr": config.warm_lr,
        "stop_lr": config.stop_lr,
    }


def run_cell(payload: dict) -> dict:
    """Solve one (scheme, N, run) cell; exceptions become recorded failures."""
    try:
        problem = problem_by_name(payload["problem"])
        scheme = scheme_by_name(
            payload["scheme"],
            theta=payload["theta"],
            c2=payload["c2"],
            c3=payload["c3"],
            balance=payload["balance"],
            cn_control_variate=not payload["cn_plain"],
        )
        overrides = {"initial_lr": payload["initial_lr"]}
        if payload["stop_lr"] is not None:
            overrides["stop_lr"] = payload["stop_lr"]
        schedule = default_schedule(scheme, payload["batch"], **overrides)
        t0 = time.perf_counter()
        sol = backward_solve(
            problem,
            scheme,
            payload["n_steps"],
            schedule=schedule,
            batch_size=payload["batch"],
            seed=payload["seed"],
            warm_initial_lr=payload["warm_lr"],
        )
        seconds = time.perf_counter() - t0
        return {**payload, "y0": sol.y0, "seconds": seconds, "error": ""}
    except Exception as exc:  # cell failures must not kill the study
        return {**payload, "y0": float("nan"), "seconds": float("nan"),
                "error": f"{type(exc).__name__}: {exc}"}


def _run_cells(config: ExperimentConfig, payloads: list) -> list:
    workers = config.effective_workers()
    if workers <= 1 or len(payloads) <= 1:
        return [run_cell(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_cell, payloads))


def fit_order(n_values, eps_values, floors) -> tuple:
    """Weighted least-squares convergence order over the step-count ladder.

    The floor of a cell is the standard error of its run-averaged value; an
    error estimate below it carries no slope information and is excluded.
    Remaining cells are weighted by the inverse variance of ``log2 eps``
    (delta method, ``sd(log2 x) = sd(x) / (x ln 2)``, regularized), so cells
    whose error sits just above their noise floor barely influence the fit.
    """
    ns = np.asarray(n_values, dtype=float)
    eps = np.asarray(eps_values, dtype=float)
    floors = np.asarray(floors, dtype=float)
    used = np.isfinite(eps) & (eps > floors) & (eps > 0)
    if np.count_nonzero(used) < 2:
        return float("nan"), used
    x = np.log2(ns[used])
    y = np.log2(eps[used])
    se_log2 = floors[used] / (eps[used] * np.log(2.0))
    w = 1.0 / (se_log2**2 + 0.01)
    xm = np.average(x, weights=w)
    ym = np.average(y, weights=w)
    slope = float(np.sum(w * (x - xm) * (y - ym)) / np.sum(w * (x - xm) ** 2))
    return -slope, used


@dataclass
class StudyResult:
    config: ExperimentConfig
    rows: list  # per-run records
    summary: dict  # scheme -> {"N": [...], "eps": [...], "order": float, ...}
    out_dir: str
    paths: dict = field(default_factory=dict)


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def run_convergence_study(config: ExperimentConfig) -> StudyResult:
    """Per-cell solves, aggregated errors and fitted orders, CSV outputs."""
    problem = problem_by_name(config.problem)
    exact = problem.exact_y0() if problem.has_exact else None
    payloads = [
        _cell_payload(config, scheme, n, run)
        for scheme in config.schemes
        for n in config.steps
        for run in range(config.ntest)
    ]
    rows = _run_cells(config, payloads)
    os.makedirs(config.out_dir, exist_ok=True)

    results_rows = [
        (r["problem"], r["scheme"], r["n_steps"], r["run"], r["seed"],
         f"{r['y0']:.12g}", r["error"])
        for r in rows
    ]
    timing_rows = [
        (r["scheme"], r["n_steps"], r["run"], f"{r['seconds']:.3f}")
        for r in rows
    ]

    summary = {}
    summary_rows = []
    for scheme in config.schemes:
        eps_list, floor_list, mean_list, std_list = [], [], [], []
        incomplete = []
        for n in config.steps:
            y0s = np.array([
                r["y0"] for r in rows
                if r["scheme"] == scheme and r["n_steps"] == n and not r["error"]
            ])
            n_fail = sum(
                1 for r in rows
                if r["scheme"] == scheme and r["n_steps"] == n and r["error"]
            )
            if n_fail:
                incomplete.append({"N": n, "failed_runs": n_fail})
            mean = float(np.mean(y0s)) if y0s.size else float("nan")
            std = float(np.std(y0s, ddof=1)) if y0s.size > 1 else 0.0
            floor = std / np.sqrt(max(y0s.size, 1))
            eps = abs(mean - exact) if exact is not None and y0s.size else float("nan")
            eps_list.append(eps)
            floor_list.append(floor)
            mean_list.append(mean)
            std_list.append(std)
            summary_rows.append(
                (scheme, n, y0s.size, f"{mean:.12g}", f"{std:.12g}",
                 f"{eps:.12g}", f"{floor:.12g}")
            )
        order, used = fit_order(config.steps, eps_list, floor_list)
        summary[scheme] = {
            "N": list(config.steps),
            "y0_mean": mean_list,
            "y0_std": std_list,
            "eps": eps_list,
            "noise_floor": floor_list,
            "order": order,
            "order_cells_used": [int(n) for n, u in zip(config.steps, used) if u],
            "incomplete": incomplete,
        }

    paths = {
        "results": os.path.join(config.out_dir, "results.csv"),
        "summary_csv": os.path.join(config.out_dir, "summary.csv"),
        "timings": os.path.join(config.out_dir, "timings.csv"),
        "summary_json": os.path.join(config.out_dir, "summary.json"),
    }
    _write_csv(paths["results"],
               ["problem", "scheme", "N", "run", "seed", "y0", "error"],
               results_rows)
    _write_csv(paths["summary_csv"],
               ["scheme", "N", "runs", "y0_mean", "y0_std", "eps", "noise_floor"],
               summary_rows)
    _write_csv(paths["timings"], ["scheme", "N", "run", "seconds"], timing_rows)
    with open(paths["summary_json"], "w", encoding="utf-8") as fh:
        json.dump(
            {
                "config": json.loads(config.to_json()),
                "config_hash": config.content_hash(),
                "exact_y0": exact,
                "schemes": summary,
            },
            fh,
            indent=2,
        )
    return StudyResult(config=config, rows=rows, summary=summary,
                       out_dir=config.out_dir, paths=paths)


def run_timing_study(config: ExperimentConfig) -> StudyResult:
    """Wall time per (scheme, N); growth ratios reported, not enforced."""
    cfg = config
    payloads = [
        _cell_payload(cfg, scheme, n, run)
        for scheme in cfg.schemes
        for n in cfg.steps
        for run in range(cfg.ntest)
    ]
    rows = _run_cells(cfg, payloads)
    os.makedirs(cfg.out_dir, exist_ok=True)
    summary = {}
    out_rows = []
    for scheme in cfg.schemes:
        secs = []
        for n in cfg.steps:
            vals = [r["seconds"] for r in rows
                    if r["scheme"] == scheme and r["n_steps"] == n and not r["error"]]
            secs.append(float(np.mean(vals)) if vals else float("nan"))
        ratios = [float("nan")] + [
            secs[i] / secs[i - 1] if secs[i - 1] > 0 else float("nan")
            for i in range(1, len(secs))
        ]
        summary[scheme] = {"N": list(cfg.steps), "seconds": secs,
                           "growth_ratios": ratios[1:]}
        for n, s, rat in zip(cfg.steps, secs, ratios):
            out_rows.append((scheme, n, f"{s:.3f}", f"{rat:.3f}"))
    path = os.path.join(cfg.out_dir, "timing_study.csv")
    _write_csv(path, ["scheme", "N", "seconds", "ratio_to_prev"], out_rows)
    return StudyResult(config=cfg, rows=rows, summary=summary,
                       out_dir=cfg.out_dir, paths={"timing_study": path})


def run_balance_sweep(config: ExperimentConfig, balances) -> StudyResult:
    """Error of the trapezoidal scheme against its correction-penalty weight."""
    balances = [float(b) for b in balances]
    if not balances or any(b <= 0 for b in balances):
        raise HarnessError("balance values must be positive")
    if set(config.schemes) != {"cn"}:
        raise HarnessError("balance sweep is defined for the cn scheme")
    problem = problem_by_name(config.problem)
    exact = problem.exact_y0()
    n = config.steps[0]
    rows_all = []
    sweep_rows = []
    summary = {}
    for bal in balances:
        payloads = [
            _cell_payload(config, "cn", n, run) | {"balance": bal}
            for run in range(config.ntest)
        ]
        rows = _run_cells(config, payloads)
        rows_all.extend(rows)
        y0s = np.array([r["y0"] for r in rows if not r["error"]])
        mean = float(np.mean(y0s)) if y0s.size else float("nan")
        eps = abs(mean - exact) if y0s.size else float("nan")
        sweep_rows.append((f"{bal:.10g}", f"{np.log2(bal):.6f}", n,
                           f"{mean:.12g}", f"{eps:.12g}"))
        summary[f"{bal:.10g}"] = {"eps": eps, "y0_mean": mean}
    os.makedirs(config.out_dir, exist_ok=True)
    path = os.path.join(config.out_dir, "balance_sweep.csv")
    _write_csv(path, ["balance", "log2_balance", "N", "y0_mean", "eps"], sweep_rows)
    return StudyResult(config=config, rows=rows_all, summary=summary,
                       out_dir=config.out_dir, paths={"balance_sweep": path})


# ---------------------------------------------------------------------------
# plotting
# ---------------------------------------------------------------------------


def _read_csv(path: str) -> tuple:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise HarnessError(f"{path}: empty CSV") from None
        rows = []
        for i, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise HarnessError(
                    f"{path}: line {i}: expected {len(header)} fields, got {len(row)}"
                )
            rows.append(row)
    return header, rows


def _series_by_scheme(header, rows, x_col, y_col):
    ix = {name: i for i, name in enumerate(header)}
    for col in ("scheme", x_col, y_col):
        if col not in ix:
            raise HarnessError(f"missing column {col!r}; have {header}")
    series = {}
    for row in rows:
        try:
            x = float(row[ix[x_col]])
            y = float(row[ix[y_col]])
        except ValueError:
            continue
        if np.isfinite(x) and np.isfinite(y) and y > 0:
            series.setdefault(row[ix["scheme"]], []).append((x, y))
    return {k: sorted(v) for k, v in series.items() if v}


def _log2_plot(series: dict, xlabel: str, ylabel: str, title: str, out_path: str):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not series:
        raise HarnessError(f"no plottable data for {title!r}; nothing written")
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for name, pts in sorted(series.items()):
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        ax.plot(xs, ys, marker="o", label=name)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log", base=2)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def emit_plots(csv_paths, out_dir: str) -> list:
    """Render log2-log2 charts from study CSVs; returns the written files.

    ``summary.csv`` yields error-vs-steps; together with ``timings.csv`` it
    also yields error-vs-time; ``timing_study.csv`` (or ``timings.csv``)
    yields time-vs-steps.
    """
    os.makedirs(out_dir, exist_ok=True)
    written = []
    summaries, timings = {}, {}
    for path in csv_paths:
        header, rows = _read_csv(path)
        if "eps" in header and "N" in header:
            summaries[path] = (header, rows)
        elif "seconds" in header and ("N" in header):
            timings[path] = (header, rows)
        else:
            raise HarnessError(f"{path}: unrecognized CSV schema {header}")
    for path, (header, rows) in summaries.items():
        series = _series_by_scheme(header, rows, "N", "eps")
        out = os.path.join(out_dir, "error_vs_steps.svg")
        _log2_plot(series, "time steps", "error", "Error against time steps", out)
        written.append(out)
    for path, (header, rows) in timings.items():
        series = _series_by_scheme(header, rows, "N", "seconds")
        out = os.path.join(out_dir, "time_vs_steps.svg")
        _log2_plot(series, "time steps", "seconds",
                   "Time cost against time steps", out)
        written.append(out)
    if summaries and timings:
        s_header, s_rows = next(iter(summaries.values()))
        t_header, t_rows = next(iter(timings.values()))
        eps = _series_by_scheme(s_header, s_rows, "N", "eps")
        secs = _series_by_scheme(t_header, t_rows, "N", "seconds")
        series = {}
        for scheme in eps:
            if scheme not in secs:
                continue
            sec_by_n = {}
            for x, y in secs[scheme]:
                sec_by_n.setdefault(x, []).append(y)
            pts = [
                (float(np.mean(sec_by_n[n])), e)
                for n, e in eps[scheme]
                if n in sec_by_n
            ]
            if pts:
                series[scheme] = sorted(pts)
        out = os.path.join(out_dir, "error_vs_time.svg")
        _log2_plot(series, "seconds", "error", "Error against time cost", out)
        written.append(out)
    return written
