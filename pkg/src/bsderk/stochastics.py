"""Forward-path simulation on the full instance grid and stochastic weights.

Paths are stored instance-major: ``states[n, q, b, :]`` is the state at
instance ``q`` of step ``n`` (``q = 0`` is ``t_{n+1}``), and ``dW[n, q]``
holds the Brownian increment from that instance to ``t_{n+1}``, so
``dW[n, 0] = 0`` and ``dW[n, Q]`` is the full step increment.  Sampling is
chronological within each step, which keeps every sub-increment independent
of the past and makes the stage-wise conditional expectations well defined.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.interpolate import CubicSpline

from .grids import TimeGrid


class SimulationError(ValueError):
    """Invalid simulation parameters."""


@dataclass(frozen=True)
class ForwardModel:
    """Forward dynamics specification, coordinatewise diagonal noise."""

    kind: str  # "drifted_bm" | "cir_nv" | "custom_em"
    dim: int
    x0: np.ndarray
    mu: Optional[np.ndarray] = None  # drifted_bm drift, (d,)
    sigma: Optional[np.ndarray] = None  # drifted_bm diagonal volatility, (d,)
    a: Optional[float] = None  # cir_nv mean-reversion rate
    b: Optional[float] = None  # cir_nv long-run mean
    sigma_cir: Optional[float] = None  # cir_nv volatility coefficient
    drift_fn: Optional[Callable] = None  # custom_em drift, x -> (..., d)
    diff_fn: Optional[Callable] = None  # custom_em diagonal diffusion


def drifted_bm_model(x0, mu, sigma) -> ForwardModel:
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    d = x0.size
    mu = np.broadcast_to(np.asarray(mu, dtype=float), (d,)).copy()
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (d,)).copy()
    return ForwardModel(kind="drifted_bm", dim=d, x0=x0, mu=mu, sigma=sigma)


def cir_model(x0, a: float, b: float, sigma_cir: float) -> ForwardModel:
    """Coordinatewise square-root diffusion ``dX = a(b - X)dt + s sqrt(X)dW``."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if a <= 0 or b <= 0:
        raise SimulationError(f"need a > 0 and b > 0, got a={a}, b={b}")
    if 2.0 * a * b < sigma_cir**2:
        raise SimulationError(
            f"positivity condition 2ab >= sigma^2 violated: {2 * a * b} < {sigma_cir ** 2}"
        )
    if np.any(x0 < 0):
        raise SimulationError("x0 must be nonnegative")
    return ForwardModel(kind="cir_nv", dim=x0.size, x0=x0, a=a, b=b, sigma_cir=sigma_cir)


def custom_em_model(x0, drift_fn, diff_fn) -> ForwardModel:
    """Euler-Maruyama fallback for dynamics outside the two built-in models."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    return ForwardModel(
        kind="custom_em", dim=x0.size, x0=x0, drift_fn=drift_fn, diff_fn=diff_fn
    )


@dataclass
class PathBatch:
    """Simulated forward states and Brownian increments on the full grid."""

    grid: TimeGrid
    states: np.ndarray  # (N, Q+1, B, d)
    dW: np.ndarray  # (N, Q+1, B, d), increment to t_{n+1}
    seed: Optional[int]
    sqrt_clamps: int = 0  # negative pre-square-root events clamped (cir_nv)

    @property
    def batch_size(self) -> int:
        return self.states.shape[2]


def nv_cir_substep(x, dw, dt, a, b, sigma_cir):
    """One splitting substep of the square-root diffusion over ``dt``.

    Composes the exact half-time flow of the Stratonovich-corrected drift
    ``a(b - x) - sigma^2/4``, the exact diffusion flow
    ``x -> (sqrt(x) + (sigma/2) dw)^2`` and the second drift half-flow.
    Negative pre-square-root values are clamped at zero; returns
    ``(x_next, n_clamped)``.
    """
    if dt == 0.0:
        return x, 0
    b_adj = b - sigma_cir**2 / (4.0 * a)
    e_half = np.exp(-a * dt / 2.0)
    x = b_adj + (x - b_adj) * e_half
    s = np.sqrt(np.maximum(x, 0.0)) + 0.5 * sigma_cir * dw
    n_clamped = int(np.count_nonzero(s < 0.0))
    s = np.maximum(s, 0.0)
    x = s * s
    x = b_adj + (x - b_adj) * e_half
    return x, n_clamped


def _check_sim_args(grid: TimeGrid, batch_size: int):
    if batch_size < 1:
        raise SimulationError(f"batch_size must be >= 1, got {batch_size}")
    if grid.n_steps < 1:
        raise SimulationError("grid must have at least one step")


def simulate_paths(
    model: ForwardModel, grid: TimeGrid, batch_size: int, seed: Optional[int]
) -> PathBatch:
    """Simulate a batch on the full grid; dispatches on the model kind."""
    if model.kind == "drifted_bm":
        return simulate_bm(model, grid, batch_size, seed)
    if model.kind == "cir_nv":
        return simulate_cir_nv(model, grid, batch_size, seed)
    if model.kind == "custom_em":
        return _simulate_em(model, grid, batch_size, seed)
    raise SimulationError(f"unknown model kind {model.kind!r}")


def _instance_brownian(grid, batch_size, rng, w_base):
    """Brownian values at the instances of one step, chronological sampling.

    Returns ``w_inst`` of shape ``(Q+1, B, d)`` with ``w_inst[Q] = w_base``
    (value at ``t_n``); zero-length gaps reuse the previous value exactly.
    """
    gaps = grid.sub_gaps()
    q1 = grid.n_stages + 1
    w_inst = np.empty((q1,) + w_base.shape)
    w_inst[q1 - 1] = w_base
    for j in range(q1 - 2, -1, -1):
        dt = gaps[j]
        if dt == 0.0:
            w_inst[j] = w_inst[j + 1]
        else:
            w_inst[j] = w_inst[j + 1] + np.sqrt(dt) * rng.standard_normal(w_base.shape)
    return w_inst


def simulate_bm(model, grid, batch_size, seed) -> PathBatch:
    """Exact sampling of ``X_t = x0 + mu t + sigma W_t`` at every instance."""
    if model.kind != "drifted_bm":
        raise SimulationError("simulate_bm requires a drifted_bm model")
    _check_sim_args(grid, batch_size)
    rng = np.random.default_rng(seed)
    n_steps, d = grid.n_steps, model.dim
    q1 = grid.n_stages + 1
    states = np.empty((n_steps, q1, batch_size, d))
    dw = np.empty((n_steps, q1, batch_size, d))
    times = grid.instances()
    w_base = np.zeros((batch_size, d))
    for n in range(n_steps):
        w_inst = _instance_brownian(grid, batch_size, rng, w_base)
        dw[n] = w_inst[0][None] - w_inst
        states[n] = model.x0 + model.mu * times[n][:, None, None] + model.sigma * w_inst
        w_base = w_inst[0]
    return PathBatch(grid=grid, states=states, dW=dw, seed=seed)


def simulate_cir_nv(model, grid, batch_size, seed) -> PathBatch:
    """Splitting scheme for the square-root diffusion on every sub-interval."""
    if model.kind != "cir_nv":
        raise SimulationError("simulate_cir_nv requires a cir_nv model")
    _check_sim_args(grid, batch_size)
    rng = np.random.default_rng(seed)
    n_steps, d = grid.n_steps, model.dim
    q1 = grid.n_stages + 1
    gaps = grid.sub_gaps()
    states = np.empty((n_steps, q1, batch_size, d))
    dw = np.empty((n_steps, q1, batch_size, d))
    x = np.broadcast_to(model.x0, (batch_size, d)).copy()
    w_base = np.zeros((batch_size, d))
    clamps = 0
    for n in range(n_steps):
        w_inst = _instance_brownian(grid, batch_size, rng, w_base)
        dw[n] = w_inst[0][None] - w_inst
        states[n, q1 - 1] = x
        for j in range(q1 - 2, -1, -1):
            x, nc = nv_cir_substep(
                x, w_inst[j] - w_inst[j + 1], gaps[j], model.a, model.b, model.sigma_cir
            )
            clamps += nc
            states[n, j] = x
        w_base = w_inst[0]
    return PathBatch(grid=grid, states=states, dW=dw, seed=seed, sqrt_clamps=clamps)


def _simulate_em(model, grid, batch_size, seed) -> PathBatch:
    _check_sim_args(grid, batch_size)
    rng = np.random.default_rng(seed)
    n_steps, d = grid.n_steps, model.dim
    q1 = grid.n_stages + 1
    gaps = grid.sub_gaps()
    states = np.empty((n_steps, q1, batch_size, d))
    dw = np.empty((n_steps, q1, batch_size, d))
    x = np.broadcast_to(model.x0, (batch_size, d)).copy()
    w_base = np.zeros((batch_size, d))
    for n in range(n_steps):
        w_inst = _instance_brownian(grid, batch_size, rng, w_base)
        dw[n] = w_inst[0][None] - w_inst
        states[n, q1 - 1] = x
        for j in range(q1 - 2, -1, -1):
            dt = gaps[j]
            if dt > 0.0:
                x = x + model.drift_fn(x) * dt + model.diff_fn(x) * (
                    w_inst[j] - w_inst[j + 1]
                )
            states[n, j] = x
        w_base = w_inst[0]
    return PathBatch(grid=grid, states=states, dW=dw, seed=seed)


# ---------------------------------------------------------------------------
# stochastic weights
# ---------------------------------------------------------------------------


@dataclass
class HWeights:
    """Per-sample stochastic weights extracted from a path batch.

    ``hq[n, q]`` is the full-gap weight of stage ``q >= 1`` (row 0 unused,
    kept zero); ``hqk[(q, k)][n]`` is the pair weight between instances
    ``q`` and ``k`` with ``c[k] < c[q]``.  ``lam`` and ``lam_bar`` report
    the empirical range of ``h * E[H_i^2]`` (diagnostics, not inputs).
    """

    grid: TimeGrid
    hq: np.ndarray  # (N, Q+1, B, d)
    hqk: dict = field(default_factory=dict)  # (q, k) -> (N, B, d)
    lam: float = np.inf
    lam_bar: float = 0.0


def build_h_weights(grid: TimeGrid, paths: PathBatch) -> HWeights:
    """Increment-ratio weights: zero mean, unit product with their increment."""
    if paths.grid is not grid and not np.array_equal(paths.grid.c, grid.c):
        raise SimulationError("grid inconsistent with path batch")
    h = grid.h
    c = grid.c
    q1 = grid.n_stages + 1
    hq = np.zeros_like(paths.dW)
    lam, lam_bar = np.inf, 0.0

    def _track(arr):
        nonlocal lam, lam_bar
        m2 = np.mean(arr * arr, axis=(0, 1))
        lam = min(lam, h * float(np.min(m2)))
        lam_bar = max(lam_bar, h * float(np.max(m2)))

    for q in range(1, q1):
        hq[:, q] = paths.dW[:, q] / (c[q] * h)
        _track(hq[:, q])
    hqk = {}
    for q in range(1, q1):
        for k in range(q):
            gap = (c[q] - c[k]) * h
            if gap == 0.0:
                continue  # coincident instances carry no weight
            arr = (paths.dW[:, q] - paths.dW[:, k]) / gap
            hqk[(q, k)] = arr
            _track(arr)
    return HWeights(grid=grid, hq=hq, hqk=hqk, lam=lam, lam_bar=lam_bar)


def h_weight_moment_stats(paths: PathBatch, weights: HWeights) -> list[dict]:
    """Empirical zero-mean / unit-product statistics per weight and component.

    Aggregates over steps and samples; ``mean`` should vanish and
    ``mean_prod`` (weight times its own increment) should be one, both within
    a few ``sd / sqrt(n_obs)``.
    """
    rows = []

    def _push(kind, q, k, arr, inc):
        prod = arr * inc
        n_obs = arr.shape[0] * arr.shape[1]
        for comp in range(arr.shape[2]):
            w = arr[:, :, comp].ravel()
            p = prod[:, :, comp].ravel()
            rows.append(
                {
                    "kind": kind,
                    "q": q,
                    "k": k,
                    "comp": comp,
                    "n_obs": n_obs,
                    "mean": float(w.mean()),
                    "sd": float(w.std()),
                    "mean_prod": float(p.mean()),
                    "sd_prod": float(p.std()),
                }
            )

    for q in range(1, paths.grid.n_stages + 1):
        _push("hq", q, None, weights.hq[:, q], paths.dW[:, q])
    for (q, k), arr in weights.hqk.items():
        _push("hqk", q, k, arr, paths.dW[:, q] - paths.dW[:, k])
    return rows


# ---------------------------------------------------------------------------
# weak-order probe
# ---------------------------------------------------------------------------


def cir_mean(model: ForwardModel, t: float) -> float:
    """Closed-form coordinate mean of the square-root diffusion."""
    x0 = float(model.x0[0])
    return model.b + (x0 - model.b) * np.exp(-model.a * t)


def cir_second_moment(model: ForwardModel, t: float) -> float:
    """Closed-form coordinate second moment, from the moment ODE chain."""
    a, b, s2 = model.a, model.b, model.sigma_cir**2
    x0 = float(model.x0[0])
    e1, e2 = np.exp(-a * t), np.exp(-2.0 * a * t)
    integ = b * (1.0 - e2) / (2.0 * a) + (x0 - b) * (e1 - e2) / a
    return x0 * x0 * e2 + (2.0 * a * b + s2) * integ


def cir_variance(model: ForwardModel, t: float) -> float:
    """Standard closed-form variance, independent of the moment ODE route."""
    a, s2 = model.a, model.sigma_cir**2
    x0 = float(model.x0[0])
    e1, e2 = np.exp(-a * t), np.exp(-2.0 * a * t)
    return x0 * (s2 / a) * (e1 - e2) + model.b * (s2 / (2.0 * a)) * (1.0 - e1) ** 2


@dataclass
class ProbeResult:
    step_sizes: np.ndarray
    errors: dict  # name -> np.ndarray over grids
    slopes: dict  # name -> float (nan when saturated at machine precision)


def _quadrature_terminal_expectation(model, grid, v, n_nodes, gh_order, domain):
    """Deterministic E[v(X_T)] for a 1-d chain via backward value iteration."""
    lo, hi = domain
    xs = np.linspace(lo, hi, n_nodes)
    nodes, wts = hermgauss(gh_order)
    wts = wts / np.sqrt(np.pi)
    h = grid.h
    dw = np.sqrt(2.0 * h) * nodes  # Gaussian increments at the quadrature nodes
    vals = v(xs[:, None])
    for _ in range(grid.n_steps):
        spline = CubicSpline(xs, vals)
        if model.kind == "drifted_bm":
            pts = xs[:, None] + model.mu[0] * h + model.sigma[0] * dw[None, :]
        else:
            pts, _ = nv_cir_substep(
                np.broadcast_to(xs[:, None], (n_nodes, gh_order)).copy(),
                dw[None, :],
                h,
                model.a,
                model.b,
                model.sigma_cir,
            )
        vals = spline(np.clip(pts, lo, hi)) @ wts
    spline = CubicSpline(xs, vals)
    return float(spline(float(model.x0[0])))


def _default_probe_domain(model, horizon):
    if model.kind == "drifted_bm":
        x0, mu, sig = float(model.x0[0]), float(model.mu[0]), float(model.sigma[0])
        half = abs(mu) * horizon + 8.0 * sig * np.sqrt(horizon) + 1e-6
        return (x0 - half, x0 + half)
    x0 = float(model.x0[0])
    far = cir_mean(model, horizon)
    spread = 8.0 * model.sigma_cir * np.sqrt(max(x0, model.b) * horizon)
    return (max(0.0, min(x0, far) - spread), max(x0, far) + spread)


def weak_order_probe(
    model: ForwardModel,
    grids: list[TimeGrid],
    test_functions: dict,
    references: dict,
    batch_size: int = 100_000,
    seed: int = 0,
    method: str = "quadrature",
    n_nodes: int = 600,
    gh_order: int = 32,
    domain=None,
    floor: float = 1e-12,
) -> ProbeResult:
    """Fit the weak-error decay rate of the step scheme against references.

    The default estimator integrates the one-step transition kernel exactly
    (1-d models, plain two-instance grids), isolating the scheme bias from
    any sampling noise; ``method="mc"`` estimates the expectations from
    ``batch_size`` simulated paths instead.  Slopes are least-squares fits of
    ``log |error|`` against ``log h``; grids whose error sits at the
    ``floor`` (machine precision) are excluded, and a slope of ``nan`` means
    every grid was saturated.
    """
    if len(grids) < 3:
        raise SimulationError("need at least 3 grids for a slope fit")
    hs = np.array([g.h for g in grids])
    errors = {name: np.empty(len(grids)) for name in test_functions}
    if method == "quadrature":
        if model.dim != 1:
            raise SimulationError("quadrature probe supports 1-d models only")
        if any(g.n_stages != 1 for g in grids):
            raise SimulationError("quadrature probe needs plain two-instance grids")
        domain = domain or _default_probe_domain(model, grids[0].horizon)
        for i, g in enumerate(grids):
            for name, v in test_functions.items():
                est = _quadrature_terminal_expectation(
                    model, g, v, n_nodes, gh_order, domain
                )
                errors[name][i] = abs(est - references[name])
    elif method == "mc":
        for i, g in enumerate(grids):
            paths = simulate_paths(model, g, batch_size, seed + i)
            x_T = paths.states[-1, 0]
            for name, v in test_functions.items():
                errors[name][i] = abs(float(np.mean(v(x_T))) - references[name])
    else:
        raise SimulationError(f"unknown probe method {method!r}")

    slopes = {}
    for name, err in errors.items():
        keep = err > floor
        if np.count_nonzero(keep) < 2:
            slopes[name] = float("nan")
        else:
            slopes[name] = float(
                np.polyfit(np.log(hs[keep]), np.log(err[keep]), 1)[0]
            )
    return ProbeResult(step_sizes=hs, errors=errors, slopes=slopes)


# ---------------------------------------------------------------------------
# trace dumps
# ---------------------------------------------------------------------------


def dump_paths(paths: PathBatch, path: str, fmt: str = "csv") -> None:
    """Write a debugging trace of every instance of every sample.

    CSV columns: ``n, q, sample, x_0..x_{d-1}, dw_0..dw_{d-1}``.  The binary
    format stores the same rows as consecutive little-endian float64 values
    with no header.
    """
    n_steps, q1, batch, d = paths.states.shape
    if fmt == "csv":
        with open(path, "w", encoding="utf-8") as fh:
            cols = (
                ["n", "q", "sample"]
                + [f"x_{i}" for i in range(d)]
                + [f"dw_{i}" for i in range(d)]
            )
            fh.write(",".join(cols) + "\n")
            for n in range(n_steps):
                for q in range(q1):
                    for s in range(batch):
                        row = (
                            [str(n), str(q), str(s)]
                            + [f"{v:.17g}" for v in paths.states[n, q, s]]
                            + [f"{v:.17g}" for v in paths.dW[n, q, s]]
                        )
                        fh.write(",".join(row) + "\n")
    elif fmt == "bin":
        with open(path, "wb") as fh:
            for n in range(n_steps):
                for q in range(q1):
                    for s in range(batch):
                        rec = [float(n), float(q), float(s)]
                        rec.extend(paths.states[n, q, s].tolist())
                        rec.extend(paths.dW[n, q, s].tolist())
                        fh.write(struct.pack("<" + "d" * len(rec), *rec))
    else:
        raise SimulationError(f"unknown dump format {fmt!r}")
