"""Deterministic 1-d stage solver via Gaussian quadrature on a spatial grid.

Every stage-wise conditional expectation is computed by integrating cubic
spline interpolants of the value tables against the exact Gaussian
transition kernel of the drifted Brownian forward, including the
weight-multiplied integrals feeding the gradient tables.  This isolates the
time-discretization error of a tableau from any regression/sampling error
and makes empirical convergence orders measurable.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.interpolate import CubicSpline

from .grids import TimeGrid
from .problems import BSDEProblem
from .tableaux import RKTableau


class OracleError(RuntimeError):
    """Quadrature solver failure (domain, contraction, or configuration)."""


@dataclass
class OracleConfig:
    n_nodes: int = 400
    gh_order: int = 32
    spread_sds: float = 8.0  # half-width of the default domain in sd units
    domain: Optional[tuple] = None  # explicit (lo, hi) overrides the default
    fp_tol: float = 1e-12
    fp_max_iter: int = 200


@dataclass
class OracleResult:
    y0: float
    z0: float
    x_nodes: np.ndarray
    y_main: np.ndarray  # (N+1, n_nodes) value tables on the main grid
    z_main: np.ndarray
    clamp_count: int  # quadrature points clipped back into the domain
    stage_tables: Optional[dict] = None  # (n, q) -> (y, z, a) instance tables


def _domain(problem: BSDEProblem, config: OracleConfig) -> tuple:
    if config.domain is not None:
        return config.domain
    x0 = float(problem.forward.x0[0])
    sig = float(problem.forward.sigma[0])
    half = config.spread_sds * sig * np.sqrt(problem.horizon)
    return (x0 - half, x0 + half)


class QuadratureSolver:
    """Backward stage recursion for one problem/tableau pair.

    ``regression_z_stages`` lists stage indices whose gradient table should
    follow the regression-implied update instead of the weight-matrix one.
    A stage loss without a correction head determines its gradient part as
    the weighted projection of the full data-fit target, which rescales the
    driver weight of source ``k`` by ``(c_q - c_k) / c_q``; for one-stage
    implicit schemes this reproduces the classical driver-free gradient
    update.  Stages with a correction head match the weight-matrix form
    exactly, so the default (empty set) covers them.
    """

    def __init__(self, problem: BSDEProblem, tableau: RKTableau, n_steps: int,
                 config: Optional[OracleConfig] = None,
                 regression_z_stages: frozenset = frozenset()):
        if problem.dim != 1:
            raise OracleError("quadrature solver supports 1-d problems only")
        if problem.forward.kind != "drifted_bm":
            raise OracleError("quadrature solver needs Gaussian transitions "
                              "(drifted_bm forward)")
        self.problem = problem
        self.tableau = tableau
        self.config = config or OracleConfig()
        self.regression_z_stages = frozenset(regression_z_stages)
        self.grid = TimeGrid(problem.horizon, n_steps, tableau.c)
        self.mu = float(problem.forward.mu[0])
        self.sigma = float(problem.forward.sigma[0])
        lo, hi = _domain(problem, self.config)
        # the diffusion cone of the initial point must fit well inside
        reach = abs(self.mu) * problem.horizon + 6.0 * self.sigma * np.sqrt(problem.horizon)
        x0 = float(problem.forward.x0[0])
        if x0 - reach < lo or x0 + reach > hi:
            raise OracleError(
                f"spatial domain [{lo}, {hi}] too narrow for the diffusion cone "
                f"of x0={x0}; widen the range to at least +/- {reach:.3g}"
            )
        self.lo, self.hi = lo, hi
        self.xs = np.linspace(lo, hi, self.config.n_nodes)
        nodes, wts = hermgauss(self.config.gh_order)
        self._gh_x = np.sqrt(2.0) * nodes  # standard-normal evaluation points
        self._gh_w = wts / np.sqrt(np.pi)
        self.clamp_count = 0

    # -- kernel integrals ---------------------------------------------------

    def _expect(self, table: np.ndarray, gap: float, weighted: bool) -> np.ndarray:
        """E[v(X')] or E[H v(X')] over a Gaussian move of duration ``gap``."""
        if gap == 0.0:
            if weighted:
                raise OracleError("weighted expectation over a zero gap")
            return table.copy()
        spline = CubicSpline(self.xs, table)
        pts = self.xs[:, None] + self.mu * gap + self.sigma * np.sqrt(gap) * self._gh_x[None, :]
        out = (pts < self.lo) | (pts > self.hi)
        self.clamp_count += int(np.count_nonzero(out))
        vals = spline(np.clip(pts, self.lo, self.hi))
        if weighted:
            return (vals * self._gh_x[None, :]) @ self._gh_w / np.sqrt(gap)
        return vals @ self._gh_w

    def _driver_table(self, t: float, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        return self.problem.driver(t, self.xs[:, None], y, z[:, None])

    # -- backward recursion --------------------------------------------------

    def solve(self, keep_stage_tables: bool = False) -> OracleResult:
        p, tab, grid = self.problem, self.tableau, self.grid
        n_steps, q1 = grid.n_steps, grid.n_stages + 1
        h, c = grid.h, grid.c
        y_main = np.empty((n_steps + 1, self.xs.size))
        z_main = np.empty_like(y_main)
        y_main[n_steps] = p.terminal(self.xs[:, None])
        z_main[n_steps] = p.terminal_grad_sigma(self.xs[:, None])[:, 0]
        stage_tables = {} if keep_stage_tables else None
        for n in range(n_steps - 1, -1, -1):
            y_st = {0: y_main[n + 1]}
            z_st = {0: z_main[n + 1]}
            f_st = {0: self._driver_table(grid.instance(n, 0), y_st[0], z_st[0])}
            for q in range(1, q1):
                t_q = grid.instance(n, q)
                # gradient table first: fully explicit
                z_new = self._expect(y_st[0], c[q] * h, weighted=True)
                a_new = np.zeros_like(z_new)
                regression_z = q in self.regression_z_stages
                for k in range(q):
                    gap = (c[q] - c[k]) * h
                    if regression_z:
                        coef = tab.a[q, k] * (c[q] - c[k]) / c[q]
                    else:
                        coef = tab.alpha[q, k]
                    # the correction table pairs the rescaled value weight
                    # against the gradient weight of the same source
                    a_coef = tab.a[q, k] * (c[q] - c[k]) / c[q] - tab.alpha[q, k]
                    if gap > 0.0 and (coef != 0.0 or (keep_stage_tables and a_coef != 0.0)):
                        hf = self._expect(f_st[k], gap, weighted=True)
                        if coef != 0.0:
                            z_new = z_new + h * coef * hf
                        if keep_stage_tables and a_coef != 0.0:
                            a_new = a_new + h * a_coef * hf
                # value table: explicit part, then diagonal fixed point
                y_new = self._expect(y_st[0], c[q] * h, weighted=False)
                for k in range(q):
                    if tab.a[q, k] == 0.0:
                        continue
                    gap = (c[q] - c[k]) * h
                    y_new = y_new + h * tab.a[q, k] * self._expect(
                        f_st[k], gap, weighted=False
                    )
                if tab.a[q, q] != 0.0:
                    y_new = self._fixed_point(y_new, t_q, z_new, h * tab.a[q, q])
                y_st[q], z_st[q] = y_new, z_new
                f_st[q] = self._driver_table(t_q, y_new, z_new)
                if keep_stage_tables:
                    stage_tables[(n, q)] = (y_new.copy(), z_new.copy(), a_new)
            y_main[n] = y_st[q1 - 1]
            z_main[n] = z_st[q1 - 1]
        x0 = float(p.forward.x0[0])
        y0 = float(CubicSpline(self.xs, y_main[0])(x0))
        z0 = float(CubicSpline(self.xs, z_main[0])(x0))
        return OracleResult(
            y0=y0, z0=z0, x_nodes=self.xs, y_main=y_main, z_main=z_main,
            clamp_count=self.clamp_count, stage_tables=stage_tables,
        )

    def _fixed_point(self, explicit: np.ndarray, t: float, z: np.ndarray,
                     weight: float) -> np.ndarray:
        """Solve ``y = explicit + weight * f(t, x, y, z)`` nodewise."""
        y = explicit.copy()
        for _ in range(self.config.fp_max_iter):
            y_next = explicit + weight * self.problem.driver(
                t, self.xs[:, None], y, z[:, None]
            )
            if not np.all(np.isfinite(y_next)):
                break
            delta = float(np.max(np.abs(y_next - y)))
            y = y_next
            if delta <= self.config.fp_tol * max(1.0, float(np.max(np.abs(y)))):
                return y
        raise OracleError(
            f"implicit stage fixed point did not contract at t={t} "
            f"(diagonal weight {weight}); reduce the step size"
        )


def quadrature_solve(problem: BSDEProblem, tableau: RKTableau, n_steps: int,
                     config: Optional[OracleConfig] = None,
                     regression_z_stages: frozenset = frozenset(),
                     keep_stage_tables: bool = False) -> OracleResult:
    return QuadratureSolver(problem, tableau, n_steps, config,
                            regression_z_stages).solve(keep_stage_tables)


@dataclass
class OrderFit:
    slope: float
    n_values: np.ndarray
    errors: np.ndarray
    used: np.ndarray  # mask of points above the precision floor
    y0_values: np.ndarray = field(default_factory=lambda: np.empty(0))


def saturation_prefix(errors: np.ndarray, floor: float, min_gain: float) -> np.ndarray:
    """Mask of leading points still above the numerical precision floor.

    A point enters the mask while its error exceeds ``floor`` and the decay
    to the next point still gains at least ``min_gain`` bits per halving;
    once the decay flattens, the remaining tail is considered saturated.
    """
    n = errors.size
    used = np.zeros(n, dtype=bool)
    for i in range(n):
        if errors[i] <= floor:
            break
        used[i] = True
        if i + 1 < n and errors[i + 1] > 0 and np.log2(errors[i] / errors[i + 1]) < min_gain:
            break
    return used


def empirical_order(problem: BSDEProblem, tableau: RKTableau, n_list,
                    config: Optional[OracleConfig] = None,
                    floor: float = 1e-9, min_gain: float = 0.5) -> OrderFit:
    """Least-squares decay rate of the solver error over a ladder of step counts.

    Trailing points saturated by quadrature precision (absolute ``floor`` or
    flattened decay, see :func:`saturation_prefix`) are excluded from the fit.
    """
    n_list = list(n_list)
    if len(n_list) < 3:
        raise OracleError("need at least 3 step counts for an order fit")
    if not problem.has_exact:
        raise OracleError("problem has no exact solution to compare against")
    exact = problem.exact_y0()
    y0s = np.array([
        quadrature_solve(problem, tableau, n, config).y0 for n in n_list
    ])
    errors = np.abs(y0s - exact)
    used = saturation_prefix(errors, floor, min_gain)
    if np.count_nonzero(used) < 2:
        slope = float("nan")
    else:
        ns = np.asarray(n_list, dtype=float)
        slope = float(-np.polyfit(np.log2(ns[used]), np.log2(errors[used]), 1)[0])
    return OrderFit(slope=slope, n_values=np.asarray(n_list), errors=errors,
                    used=used, y0_values=y0s)
