"""Stage-wise regression losses and the backward-in-time training loop.

Each backward step trains one small network per stage: the network heads
predict the value, its gradient part, and (for higher-order stages) a
correction term that absorbs the mismatch between the two driver
weightings.  The generic stage loss below covers every supported scheme;
the dedicated one-stage losses are kept as direct transcriptions and are
checked against the generic path in the tests.
"""
from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .grids import TimeGrid
from .nets import (
    MLP,
    TrainLog,
    TrainSchedule,
    TrainingDiverged,
    init_mlp,
    load_checkpoint,
    save_checkpoint,
    split_heads,
    train_to_convergence,
)
from .problems import BSDEProblem, problem_by_name
from .stochastics import nv_cir_substep
from .tableaux import (
    RKTableau,
    crank_nicolson_tableau,
    rk2_tableau,
    rk3_tableau,
    theta_tableau,
)


class SchemeError(ValueError):
    """Invalid scheme configuration."""


class SolveRefusedError(RuntimeError):
    """Step size too large for the implicit stage contraction."""


@dataclass(frozen=True)
class StageSpec:
    q: int  # stage row index, 1..Q
    needs_a: bool
    balance: float = 0.0  # correction-penalty weight, used when needs_a


@dataclass(frozen=True)
class SchemeSpec:
    name: str
    tableau: RKTableau
    stages: tuple
    cn_control_variate: bool = True

    @property
    def n_stages(self) -> int:
        return self.tableau.n_stages


_EULER_STOP_LR = 1e-6
_DEFAULT_STOP_LR = 1e-9


def scheme_by_name(
    name: str,
    theta: float = 0.5,
    c2: float = 0.5,
    c3: float = 0.7,
    balance: Optional[float] = None,
    cn_control_variate: bool = True,
) -> SchemeSpec:
    """Build one of the supported schemes with its default balance numbers."""
    key = name.replace("-", "_").lower()
    if key in ("euler_implicit", "eui"):
        tab, stages = theta_tableau(1.0), (StageSpec(1, False),)
    elif key in ("euler_explicit", "eue"):
        tab, stages = theta_tableau(0.0), (StageSpec(1, False),)
    elif key == "theta":
        tab, stages = theta_tableau(theta), (StageSpec(1, False),)
    elif key in ("cn", "crank_nicolson"):
        tab = crank_nicolson_tableau()
        stages = (StageSpec(1, True, balance if balance is not None else 4.0 / 3.0),)
    elif key == "rk2":
        tab = rk2_tableau(c2)
        stages = (
            StageSpec(1, False),
            StageSpec(2, True, balance if balance is not None else 25.0 * tab.c[2]),
        )
    elif key == "rk3":
        tab = rk3_tableau(c2, c3)
        stages = (
            StageSpec(1, False),
            StageSpec(2, True, balance if balance is not None else 25.0 * tab.c[2]),
            StageSpec(3, True, balance if balance is not None else 25.0 * tab.c[3]),
        )
    else:
        raise SchemeError(f"unknown scheme {name!r}")
    return SchemeSpec(name=key, tableau=tab, stages=stages,
                      cn_control_variate=cn_control_variate)


def default_schedule(scheme: SchemeSpec, batch_size: int, **overrides) -> TrainSchedule:
    """Scheme-dependent stop rate: the one-stage first-order schemes may stop early."""
    stop = _EULER_STOP_LR if scheme.name in ("euler_implicit", "euler_explicit", "theta") \
        else _DEFAULT_STOP_LR
    kwargs = dict(batch_size=batch_size, stop_lr=stop)
    kwargs.update(overrides)
    return TrainSchedule(**kwargs)


# ---------------------------------------------------------------------------
# stage functions (frozen regressors and the terminal closure)
# ---------------------------------------------------------------------------


class TerminalFunction:
    """Exact terminal pair ``(g, sigma^T grad g)``; closures, not networks."""

    def __init__(self, problem: BSDEProblem):
        self._g = problem.terminal
        self._zg = problem.terminal_grad_sigma

    def __call__(self, x):
        return self._g(x), self._zg(x)


class FrozenStageNet:
    """Read-only view of a trained stage network exposing the (u, v) heads."""

    def __init__(self, net: MLP, dim: int):
        self.net = net.copy()
        self.dim = dim

    def __call__(self, x):
        u, v, _ = split_heads(self.net(x), self.dim)
        return u, v

    def a_values(self, x):
        _, _, a = split_heads(self.net(x), self.dim)
        return a


# ---------------------------------------------------------------------------
# step simulation (fresh batch per epoch, instances of a single step)
# ---------------------------------------------------------------------------


class StepSimulator:
    """Draw the forward states and increments of one backward step.

    The Brownian layer is sampled chronologically inside the step; the state
    at the step's left endpoint comes either from the exact Gaussian law
    (drifted Brownian forward) or by composing the splitting/Euler
    transitions over every sub-interval from time zero.
    """

    def __init__(self, problem: BSDEProblem, grid: TimeGrid):
        self.problem = problem
        self.grid = grid
        self.model = problem.forward
        self._gaps = grid.sub_gaps()

    def _intra_step(self, w_base, rng):
        q1 = self.grid.n_stages + 1
        w_inst = np.empty((q1,) + w_base.shape)
        w_inst[q1 - 1] = w_base
        for j in range(q1 - 2, -1, -1):
            dt = self._gaps[j]
            if dt == 0.0:
                w_inst[j] = w_inst[j + 1]
            else:
                w_inst[j] = w_inst[j + 1] + np.sqrt(dt) * rng.standard_normal(w_base.shape)
        return w_inst

    def sample(self, n: int, batch_size: int, rng: np.random.Generator):
        """States and increments at the instances of step ``n``: (Q+1, B, d)."""
        m = self.model
        d = m.dim
        if m.kind == "drifted_bm":
            t_n = self.grid.t_main(n)
            w_n = (np.sqrt(t_n) * rng.standard_normal((batch_size, d))
                   if t_n > 0 else np.zeros((batch_size, d)))
            w_inst = self._intra_step(w_n, rng)
            times = self.grid.instances()[n]
            states = m.x0 + m.mu * times[:, None, None] + m.sigma * w_inst
            dw = w_inst[0][None] - w_inst
            return states, dw
        # path-dependent forwards: walk every sub-interval from time zero
        q1 = self.grid.n_stages + 1
        x = np.broadcast_to(m.x0, (batch_size, d)).copy()
        w_base = np.zeros((batch_size, d))
        for step in range(n):
            w_inst = self._intra_step(w_base, rng)
            for j in range(q1 - 2, -1, -1):
                x = self._transition(x, w_inst[j] - w_inst[j + 1], self._gaps[j])
            w_base = w_inst[0]
        w_inst = self._intra_step(w_base, rng)
        states = np.empty((q1, batch_size, d))
        states[q1 - 1] = x
        for j in range(q1 - 2, -1, -1):
            states[j] = self._transition(states[j + 1], w_inst[j] - w_inst[j + 1],
                                         self._gaps[j])
        dw = w_inst[0][None] - w_inst
        return states, dw

    def _transition(self, x, dw, dt):
        if dt == 0.0:
            return x
        m = self.model
        if m.kind == "cir_nv":
            x_next, _ = nv_cir_substep(x, dw, dt, m.a, m.b, m.sigma_cir)
            return x_next
        if m.kind == "custom_em":
            return x + m.drift_fn(x) * dt + m.diff_fn(x) * dw
        raise SchemeError(f"unsupported forward kind {m.kind!r}")


def state_moments(problem: BSDEProblem, grid: TimeGrid, n: int, q: int,
                  pilot_seed: int = 0):
    """Coordinatewise mean and spread of the state at a stage instance.

    Used to standardize network inputs; closed forms for the two built-in
    forwards, a pilot simulation otherwise.  The spread degenerates to zero
    at time zero, where the state is deterministic anyway.
    """
    m = problem.forward
    t = grid.instance(n, q)
    if m.kind == "drifted_bm":
        return m.x0 + m.mu * t, m.sigma * np.sqrt(t)
    if m.kind == "cir_nv":
        e1 = np.exp(-m.a * t)
        center = m.b + (m.x0 - m.b) * e1
        s2 = m.sigma_cir**2
        var = m.x0 * (s2 / m.a) * (e1 - e1 * e1) \
            + m.b * (s2 / (2.0 * m.a)) * (1.0 - e1) ** 2
        return center, np.sqrt(np.maximum(var, 0.0))
    sim = StepSimulator(problem, grid)
    states, _ = sim.sample(n, 256, np.random.default_rng(pilot_seed))
    return states[q].mean(axis=0), states[q].std(axis=0)


# ---------------------------------------------------------------------------
# stage targets and the generic loss
# ---------------------------------------------------------------------------


@dataclass
class StageBatch:
    """Per-sample quantities entering one stage loss."""

    x: np.ndarray  # (B, d) states at the stage instance
    dw: np.ndarray  # (B, d) Brownian increment to t_{n+1}
    target_y: np.ndarray  # (B,) next value plus accumulated explicit drivers
    a_target: Optional[np.ndarray]  # (B, d), None when the stage has no A head


def build_stage_batch(
    problem: BSDEProblem,
    grid: TimeGrid,
    tableau: RKTableau,
    n: int,
    q: int,
    priors: dict,
    states: np.ndarray,
    dw: np.ndarray,
    needs_a: bool,
    cn_control_variate: bool = False,
) -> StageBatch:
    """Assemble the data-fit target and the correction target for stage ``q``.

    ``priors[k]`` maps instance index ``k < q`` to its frozen (u, v) pair;
    index 0 is the previous step's output.  The correction target pairs the
    value-weighted full-gap weight against the gradient-weighted pair weight
    for every earlier instance; terms whose two coefficients coincide cancel
    sample by sample.
    """
    if q < 1:
        raise SchemeError("stage index must be >= 1; index 0 is the previous step")
    h = grid.h
    c = tableau.c
    f_vals = {}
    for k in range(q):
        if tableau.a[q, k] == 0.0 and tableau.alpha[q, k] == 0.0:
            continue
        u_k, v_k = priors[k](states[k])
        f_vals[k] = problem.driver(grid.instance(n, k), states[k], u_k, v_k)
    u_next, _ = priors[0](states[0])
    target_y = u_next.copy()
    for k, f_k in f_vals.items():
        if tableau.a[q, k] != 0.0:
            target_y = target_y + h * tableau.a[q, k] * f_k

    a_target = None
    if needs_a:
        gap_q = c[q] * h
        h_q = dw[q] / gap_q
        a_target = np.zeros_like(states[q])
        if cn_control_variate:
            # one-stage trapezoidal variant: recentre the driver at the
            # stage instance to shrink the weighted-target variance
            u_here, v_here = priors[0](states[q])
            f_far = f_vals[0]
            f_near = problem.driver(grid.instance(n, q), states[q], u_here, v_here)
            a_target = -(h / 2.0) * (f_far - f_near)[:, None] * h_q
        else:
            for k, f_k in f_vals.items():
                coef_a = tableau.a[q, k]
                coef_alpha = tableau.alpha[q, k]
                w = coef_a * h_q
                if coef_alpha != 0.0:
                    gap = (c[q] - c[k]) * h
                    w = w - coef_alpha * (dw[q] - dw[k]) / gap
                else:
                    w = np.broadcast_to(w, states[q].shape)
                a_target = a_target + h * f_k[:, None] * w
    return StageBatch(x=states[q], dw=dw[q], target_y=target_y, a_target=a_target)


class StageLoss:
    """Quadratic data-fit plus weighted correction penalty for one stage."""

    def __init__(self, problem: BSDEProblem, t_stage: float, h: float,
                 a_diag: float, needs_a: bool, balance: float = 0.0):
        self.problem = problem
        self.t = t_stage
        self.h = h
        self.a_diag = a_diag
        self.needs_a = needs_a
        self.balance = balance

    def _residual(self, out, batch):
        u, v, a = split_heads(out, batch.x.shape[1])
        pred = u + np.sum((v if a is None else v + a) * batch.dw, axis=1)
        if self.a_diag != 0.0:
            pred = pred - self.h * self.a_diag * self.problem.driver(
                self.t, batch.x, u, v
            )
        r = batch.target_y - pred
        bad = ~np.isfinite(r)
        if bad.any():
            idx = int(np.argmax(bad))
            raise TrainingDiverged(f"non-finite stage loss at sample {idx}",
                                   sample_index=idx)
        return u, v, a, r

    def value(self, out, batch) -> float:
        _, _, a, r = self._residual(out, batch)
        total = float(np.mean(r * r))
        if self.needs_a:
            pa = a - batch.a_target
            total += self.balance * self.h * float(np.mean(np.sum(pa * pa, axis=1)))
        return total

    def value_and_output_grads(self, out, batch):
        u, v, a, r = self._residual(out, batch)
        b = r.size
        value = float(np.mean(r * r))
        dout = np.zeros_like(out)
        d = batch.x.shape[1]
        if self.a_diag != 0.0:
            fy = self.problem.driver_dy(self.t, batch.x, u, v)
            fz = self.problem.driver_dz(self.t, batch.x, u, v)
            dpred_du = 1.0 - self.h * self.a_diag * fy
            dpred_dv = batch.dw - self.h * self.a_diag * fz
        else:
            dpred_du = np.ones_like(u)
            dpred_dv = batch.dw
        scale = -2.0 * r / b
        dout[:, 0] = scale * dpred_du
        dout[:, 1:1 + d] = scale[:, None] * dpred_dv
        if a is not None:
            dout[:, 1 + d:1 + 2 * d] = scale[:, None] * batch.dw
            if self.needs_a:
                pa = a - batch.a_target
                value += self.balance * self.h * float(np.mean(np.sum(pa * pa, axis=1)))
                dout[:, 1 + d:1 + 2 * d] += 2.0 * self.balance * self.h * pa / b
        return value, dout


def rk_stage_loss(
    problem: BSDEProblem,
    grid: TimeGrid,
    tableau: RKTableau,
    n: int,
    q: int,
    priors: dict,
    states: np.ndarray,
    dw: np.ndarray,
    out: np.ndarray,
    needs_a: bool,
    balance: float = 0.0,
    cn_control_variate: bool = False,
) -> float:
    """Generic stage loss of candidate raw outputs ``out`` on one batch."""
    batch = build_stage_batch(problem, grid, tableau, n, q, priors, states, dw,
                              needs_a, cn_control_variate)
    loss = StageLoss(problem, grid.instance(n, q), grid.h, float(tableau.a[q, q]),
                     needs_a, balance)
    return loss.value(out, batch)


# -- dedicated one-stage losses (direct transcriptions, used as cross-checks)


def euler_implicit_loss(problem, t_n, h, phi, x_n, x_next, dw, u, v) -> float:
    """One-stage implicit loss on explicit head candidates ``(u, v)``.

    ``phi`` maps states to previous-step values (B,); the gradient closure
    is not needed since the driver sits at the current instance.
    """
    pred = u - h * problem.driver(t_n, x_n, u, v) + np.sum(v * dw, axis=1)
    r = phi(x_next) - pred
    return float(np.mean(r * r))


def euler_explicit_loss(problem, t_next, h, phi, psi, x_n, x_next, dw, u, v) -> float:
    u_next = phi(x_next)
    target = u_next + h * problem.driver(t_next, x_next, u_next, psi(x_next))
    pred = u + np.sum(v * dw, axis=1)
    r = target - pred
    return float(np.mean(r * r))


def crank_nicolson_loss(
    problem, t_n, h, phi, psi, x_n, x_next, dw, u, v, a,
    balance: float, control_variate: bool = False,
) -> float:
    t_next = t_n + h
    u_next = phi(x_next)
    f_next = problem.driver(t_next, x_next, u_next, psi(x_next))
    data = u_next - (
        u
        - (h / 2.0) * f_next
        - (h / 2.0) * problem.driver(t_n, x_n, u, v)
        + np.sum((v + a) * dw, axis=1)
    )
    h_w = dw / h
    if control_variate:
        f_here = problem.driver(t_n, x_n, phi(x_n), psi(x_n))
        target = -(h / 2.0) * (f_next - f_here)[:, None] * h_w
    else:
        target = -(h / 2.0) * f_next[:, None] * h_w
    pa = a - target
    return float(np.mean(data * data)) + balance * h * float(
        np.mean(np.sum(pa * pa, axis=1))
    )


# ---------------------------------------------------------------------------
# backward solve
# ---------------------------------------------------------------------------


@dataclass
class SolvedBSDE:
    """Trained stage regressors for every step, plus the initial value."""

    problem_name: str
    scheme: SchemeSpec
    grid: TimeGrid
    y0: float
    stage_nets: dict  # (n, q) -> MLP
    logs: dict  # (n, q) -> TrainLog
    terminal: TerminalFunction
    seed: Optional[int] = None
    schedule: Optional[TrainSchedule] = None
    wall_seconds: float = 0.0

    def stage_function(self, n: int, q: Optional[int] = None):
        """Frozen (u, v) pair at stage ``q`` of step ``n``; main value for q=None."""
        if n == self.grid.n_steps:
            return self.terminal
        q = self.scheme.n_stages if q is None else q
        net = self.stage_nets[(n, q)]
        return FrozenStageNet(net, net.d_in)

    def evaluate_u(self, n: int, x: np.ndarray) -> np.ndarray:
        return self.stage_function(n)(x)[0]

    def evaluate_z(self, n: int, x: np.ndarray) -> np.ndarray:
        return self.stage_function(n)(x)[1]


def check_well_posedness(tableau: RKTableau, h: float, lipschitz_k: float) -> float:
    """Implicit-stage contraction factor; must stay below one."""
    return tableau.max_diag() * h * lipschitz_k


def backward_solve(
    problem: BSDEProblem,
    scheme: SchemeSpec,
    n_steps: int,
    schedule: Optional[TrainSchedule] = None,
    batch_size: int = 1000,
    seed: Optional[int] = 0,
    warm_start: bool = True,
    warm_initial_lr: float = 3e-3,
    width_extra: int = 10,
) -> SolvedBSDE:
    """Train the stage regressors backward in time and read off the value.

    Each stage minimizes its loss over fresh simulated batches via the
    adaptive rate ladder; stage networks are warm started from the matching
    stage of the previously solved (later) step, with a reduced initial
    rate, unless ``warm_start`` is disabled.
    """
    t_start = time.perf_counter()
    tab = scheme.tableau
    grid = TimeGrid(problem.horizon, n_steps, tab.c)
    contraction = check_well_posedness(tab, grid.h, problem.lipschitz_k)
    if contraction >= 1.0:
        raise SolveRefusedError(
            f"implicit stage contraction factor {contraction:.3g} >= 1 at "
            f"N={n_steps}; increase the step count"
        )
    if schedule is None:
        schedule = default_schedule(scheme, batch_size)
    d = problem.dim
    width = d + width_extra
    rng = np.random.default_rng(seed)
    sim = StepSimulator(problem, grid)
    terminal = TerminalFunction(problem)
    stage_nets, logs = {}, {}
    prev_nets = {}
    step_fn = terminal
    for n in range(n_steps - 1, -1, -1):
        priors = {0: step_fn}
        for st in scheme.stages:
            q = st.q
            d1 = 1 + (2 * d if st.needs_a else d)
            center, spread = state_moments(problem, grid, n, q)
            spread = np.maximum(spread, 1e-12)
            if warm_start and q in prev_nets:
                net = prev_nets[q].copy()
                net.input_center, net.input_scale = center, spread
                sched_q = replace(schedule,
                                  initial_lr=min(schedule.initial_lr, warm_initial_lr))
            else:
                init_seed = np.random.SeedSequence(seed, spawn_key=(n, q))
                net = init_mlp(d, d1, width, seed=init_seed,
                               input_center=center, input_scale=spread)
                sched_q = schedule
            loss = StageLoss(problem, grid.instance(n, q), grid.h,
                             float(tab.a[q, q]), st.needs_a, st.balance)
            cn_cv = scheme.cn_control_variate and scheme.name in ("cn", "crank_nicolson")

            def data_source(rng_, size, _n=n, _q=q, _needs=st.needs_a, _cv=cn_cv,
                            _priors=priors):
                states, dw = sim.sample(_n, size, rng_)
                return build_stage_batch(problem, grid, tab, _n, _q, _priors,
                                         states, dw, _needs, _cv)

            try:
                logs[(n, q)] = train_to_convergence(net, loss, data_source, sched_q, rng)
            except TrainingDiverged as exc:
                raise TrainingDiverged(
                    f"stage (n={n}, q={q}) diverged: {exc}", exc.sample_index
                ) from exc
            stage_nets[(n, q)] = net
            priors[q] = FrozenStageNet(net, d)
        step_fn = priors[scheme.n_stages]
        prev_nets = {st.q: stage_nets[(n, st.q)] for st in scheme.stages}
    x0 = problem.forward.x0[None, :]
    y0 = float(step_fn(x0)[0][0])
    return SolvedBSDE(
        problem_name=problem.name,
        scheme=scheme,
        grid=grid,
        y0=y0,
        stage_nets=stage_nets,
        logs=logs,
        terminal=terminal,
        seed=seed,
        schedule=schedule,
        wall_seconds=time.perf_counter() - t_start,
    )


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_solution(sol: SolvedBSDE, out_dir: str) -> None:
    """Manifest plus one checkpoint and one training-log CSV per stage."""
    os.makedirs(out_dir, exist_ok=True)
    stages = []
    for (n, q), net in sorted(sol.stage_nets.items()):
        ckpt = f"stage_n{n}_q{q}.net"
        log_csv = f"stage_n{n}_q{q}_log.csv"
        save_checkpoint(net, os.path.join(out_dir, ckpt))
        with open(os.path.join(out_dir, log_csv), "w", newline="",
                  encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "test_loss", "lr"])
            writer.writerows(sol.logs[(n, q)].rows)
        stages.append({"n": n, "q": q, "checkpoint": ckpt, "log": log_csv})
    manifest = {
        "problem": sol.problem_name,
        "scheme": sol.scheme.name,
        "tableau": json.loads(sol.scheme.tableau.to_json()),
        "balances": [
            {"q": st.q, "needs_a": st.needs_a, "balance": st.balance}
            for st in sol.scheme.stages
        ],
        "control_variate": sol.scheme.cn_control_variate,
        "n_steps": sol.grid.n_steps,
        "horizon": sol.grid.horizon,
        "seed": sol.seed,
        "schedule": None if sol.schedule is None else vars(sol.schedule),
        "y0": sol.y0,
        "stages": stages,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)


def load_solution(out_dir: str, problem: Optional[BSDEProblem] = None) -> SolvedBSDE:
    with open(os.path.join(out_dir, "manifest.json"), encoding="utf-8") as fh:
        manifest = json.load(fh)
    if problem is None:
        problem = problem_by_name(manifest["problem"])
    tableau = RKTableau.from_json(json.dumps(manifest["tableau"]))
    stages = tuple(
        StageSpec(e["q"], e["needs_a"], e.get("balance", 0.0))
        for e in manifest["balances"]
    )
    scheme = SchemeSpec(
        name=manifest["scheme"],
        tableau=tableau,
        stages=stages,
        cn_control_variate=manifest.get("control_variate", True),
    )
    grid = TimeGrid(manifest["horizon"], manifest["n_steps"], tableau.c)
    stage_nets, logs = {}, {}
    for entry in manifest["stages"]:
        key = (entry["n"], entry["q"])
        stage_nets[key] = load_checkpoint(os.path.join(out_dir, entry["checkpoint"]))
        logs[key] = TrainLog()
    return SolvedBSDE(
        problem_name=manifest["problem"],
        scheme=scheme,
        grid=grid,
        y0=manifest["y0"],
        stage_nets=stage_nets,
        logs=logs,
        terminal=TerminalFunction(problem),
        seed=manifest["seed"],
    )
