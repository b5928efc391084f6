"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The two end-to-end studies are desk-scale but still take minutes each; they
run through the same public harness entry points as the CLI.
"""
import os
from fractions import Fraction

import numpy as np
import pytest

from bsderk.grids import TimeGrid
from bsderk.harness import ExperimentConfig, run_convergence_study
from bsderk.nets import init_mlp, loss_gradient
from bsderk.oracle import OracleConfig, empirical_order
from bsderk.problems import bm_cos_problem, cos_1d_problem, linear_1d_problem
from bsderk.schemes import (
    StageLoss,
    StepSimulator,
    backward_solve,
    build_stage_batch,
    default_schedule,
    scheme_by_name,
)
from bsderk.stochastics import (
    build_h_weights,
    cir_mean,
    cir_model,
    cir_second_moment,
    cir_variance,
    drifted_bm_model,
    h_weight_moment_stats,
    simulate_paths,
    weak_order_probe,
)
from bsderk.tableaux import (
    crank_nicolson_tableau,
    rk2_tableau,
    rk3_tableau,
    theta_tableau,
    validate_order_conditions,
)

WORKERS = 2


def _report(num, desc, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    print(f"[{status}] criterion {num}: {desc} {detail}".rstrip())
    assert ok, f"criterion {num} failed: {desc} {detail}"


# -- 1 -----------------------------------------------------------------------


def test_criterion_1_tableau_algebra():
    ok = True
    details = []
    for tab, order in [
        (theta_tableau(0.0), 1),
        (theta_tableau(0.25), 1),
        (theta_tableau(0.5), 1),
        (theta_tableau(0.75), 1),
        (theta_tableau(1.0), 1),
        (crank_nicolson_tableau(), 2),
        (rk2_tableau(0.5), 2),
        (rk3_tableau(0.3, 0.7), 3),
    ]:
        rep = validate_order_conditions(tab, order, tol=1e-12)
        if not rep.passed:
            ok = False
            details.append(f"{tab.kind}: {rep.violations}")
    tab = rk3_tableau(0.3, 0.7)
    c2, c3 = Fraction(3, 10), Fraction(7, 10)
    exact = {
        (3, 1): (3 * c3 - 2) / (6 * c2 * (c3 - c2)),
        (3, 2): (2 - 3 * c2) / (6 * c3 * (c3 - c2)),
    }
    checks = [
        abs(tab.a[3, 1] * 0.3 + tab.a[3, 2] * 0.7 - 0.5) < 1e-12,
        abs(tab.a[3, 1] * 0.3**2 + tab.a[3, 2] * 0.7**2 - 1.0 / 3.0) < 1e-12,
        abs(tab.a[3, 2] * tab.a[2, 1] * 0.3 - 1.0 / 6.0) < 1e-12,
        abs(tab.a[3, 0] + tab.a[3, 1] + tab.a[3, 2] - 1.0) < 1e-12,
        abs(tab.a[3, 1] - float(exact[(3, 1)])) < 1e-12,
        abs(tab.a[3, 2] - float(exact[(3, 2)])) < 1e-12,
    ]
    ok = ok and all(checks)
    _report(1, "tableau order conditions at 1e-12", ok, "; ".join(details))


# -- 2 -----------------------------------------------------------------------


def test_criterion_2_h_weight_moments():
    failures = []
    cases = [
        (1, np.array([0.0, 0.3, 0.7, 1.0])),
        (10, np.array([0.0, 1.0])),
    ]
    for d, c in cases:
        grid = TimeGrid(0.1, 1, c)  # h = 0.1
        model = drifted_bm_model(x0=np.zeros(d), mu=np.zeros(d), sigma=np.ones(d))
        paths = simulate_paths(model, grid, 1_000_000, seed=123)
        weights = build_h_weights(grid, paths)
        for row in h_weight_moment_stats(paths, weights):
            se = row["sd"] / np.sqrt(row["n_obs"])
            if abs(row["mean"]) > 4 * se:
                failures.append(f"d={d} {row['kind']}{row['q']},{row['k']} mean")
            se_p = row["sd_prod"] / np.sqrt(row["n_obs"])
            if abs(row["mean_prod"] - 1.0) > 4 * se_p:
                failures.append(f"d={d} {row['kind']}{row['q']},{row['k']} product")
        del paths, weights
    _report(2, "stochastic-weight moments at B=1e6, h=0.1, d in {1,10}",
            not failures, "; ".join(failures))


# -- 3 -----------------------------------------------------------------------


def _grad_configs():
    combos = []
    for d in (3, 2):
        for scheme, stages in [
            ("euler_implicit", (1,)),
            ("euler_explicit", (1,)),
            ("cn", (1,)),
            ("rk2", (1, 2)),
            ("rk3", (1, 2, 3)),
        ]:
            for q in stages:
                combos.append((d, scheme, q))
    # 16 (scheme, stage, d) combos; repeat the first four with fresh seeds
    return [(d, s, q, 100 + i) for i, (d, s, q) in enumerate(combos)] + [
        (d, s, q, 900 + i) for i, (d, s, q) in enumerate(combos[:4])
    ]


def test_criterion_3_gradient_oracle():
    failures = []
    for d, scheme_name, q, seed in _grad_configs():
        problem = bm_cos_problem(dim=d)
        scheme = scheme_by_name(scheme_name)
        st = scheme.stages[q - 1]
        tab = scheme.tableau
        grid = TimeGrid(problem.horizon, 4, tab.c)
        sim = StepSimulator(problem, grid)
        rng = np.random.default_rng(seed)
        states, dw = sim.sample(2, 16, rng)
        priors = {
            k: (lambda t: (lambda x: (problem.exact_u(t, x), problem.exact_z(t, x))))(
                grid.instance(2, k)
            )
            for k in range(q)
        }
        batch = build_stage_batch(
            problem, grid, tab, 2, q, priors, states, dw, st.needs_a,
            cn_control_variate=(scheme_name == "cn"),
        )
        loss = StageLoss(problem, grid.instance(2, q), grid.h,
                         float(tab.a[q, q]), st.needs_a, st.balance)
        d1 = 1 + (2 * d if st.needs_a else d)
        net = init_mlp(d, d1, d + 4, seed=seed)
        _, gw, gb = loss_gradient(net, loss, batch)
        packed = []
        for w, b in zip(gw, gb):
            packed.append(w.ravel())
            packed.append(b.ravel())
        flat = np.concatenate(packed)
        theta = net.pack()
        scale = max(np.max(np.abs(flat)), 1e-12)
        eps = 1e-5
        idx = rng.choice(theta.size, size=10, replace=False)
        for i in idx:
            tp = theta.copy()
            tp[i] += eps
            net.unpack(tp)
            up = loss.value(net(batch.x), batch)
            tp[i] -= 2 * eps
            net.unpack(tp)
            dn = loss.value(net(batch.x), batch)
            net.unpack(theta)
            fd = (up - dn) / (2 * eps)
            tol = 1e-4 * max(abs(fd), abs(flat[i]), 1e-2 * scale)
            if abs(fd - flat[i]) > tol:
                failures.append(
                    f"{scheme_name} q={q} d={d} coord {i}: ad={flat[i]:.3e} fd={fd:.3e}"
                )
    _report(3, "reverse-mode vs finite-difference gradients on 20 configs",
            not failures, "; ".join(failures[:3]))


# -- 4 -----------------------------------------------------------------------


def test_criterion_4_discrete_time_orders():
    problem = cos_1d_problem()
    ladder = [4, 8, 16, 32, 64]
    config = OracleConfig(n_nodes=800)
    bounds = {
        "euler_implicit": (theta_tableau(1.0), 0.8, 1.2),
        "euler_explicit": (theta_tableau(0.0), 0.8, 1.2),
        "crank_nicolson": (crank_nicolson_tableau(), 1.7, 2.3),
        "rk2": (rk2_tableau(0.5), 1.7, 2.3),
        "rk3": (rk3_tableau(0.3, 0.7), 2.5, 3.5),
    }
    failures = []
    details = []
    for name, (tab, lo, hi) in bounds.items():
        fit = empirical_order(problem, tab, ladder, config)
        details.append(f"{name}={fit.slope:.2f}")
        if not lo <= fit.slope <= hi:
            failures.append(f"{name}: slope {fit.slope:.3f} outside [{lo}, {hi}]")
    _report(4, "quadrature-oracle convergence orders", not failures,
            "(" + ", ".join(details) + ") " + "; ".join(failures))


# -- 5 -----------------------------------------------------------------------


def test_criterion_5_weak_order_of_cir_splitting():
    model = cir_model(x0=np.array([10.0]), a=1.0 / 50.0, b=3.0,
                      sigma_cir=1.0 / np.sqrt(10.0))
    # the two closed-form moment routes must agree before serving as references
    assert cir_second_moment(model, 1.0) == pytest.approx(
        cir_variance(model, 1.0) + cir_mean(model, 1.0) ** 2, rel=1e-12
    )
    grids = [TimeGrid(1.0, n, np.array([0.0, 1.0])) for n in (4, 8, 16, 32)]
    fns = {"m1": lambda x: x[:, 0], "m2": lambda x: x[:, 0] ** 2}
    refs = {"m1": cir_mean(model, 1.0), "m2": cir_second_moment(model, 1.0)}
    res = weak_order_probe(model, grids, fns, refs, domain=(2.0, 18.0))
    ok = all(1.5 <= res.slopes[k] <= 2.5 for k in ("m1", "m2"))
    _report(5, "splitting-scheme weak order against closed-form moments", ok,
            f"(slope_m1={res.slopes['m1']:.2f}, slope_m2={res.slopes['m2']:.2f})")


# -- 6 and 9 ------------------------------------------------------------------


def _criterion6_config(out_dir):
    return ExperimentConfig(
        problem="bm-cos",
        schemes=("cn", "euler_implicit"),
        steps=(2, 4, 8, 16),
        batch=1000,
        ntest=4,
        seed=42,
        out_dir=out_dir,
        workers=WORKERS,
    )


@pytest.fixture(scope="module")
def bm_study(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("bm_study"))
    return run_convergence_study(_criterion6_config(out))


def test_criterion_6_benchmark_solve(bm_study):
    cn = bm_study.summary["cn"]
    eui = bm_study.summary["euler_implicit"]
    eps_cn_16 = cn["eps"][cn["N"].index(16)]
    eps_eui_16 = eui["eps"][eui["N"].index(16)]
    checks = {
        "eps(cn, N=16) < 0.02": eps_cn_16 < 0.02,
        "eps(cn, N=16) < eps(euler_implicit, N=16)": eps_cn_16 < eps_eui_16,
        "cn order in [1.5, 2.5]": 1.5 <= cn["order"] <= 2.5,
        "euler order in [0.6, 1.4]": 0.6 <= eui["order"] <= 1.4,
    }
    detail = (f"(eps_cn16={eps_cn_16:.4f}, eps_eui16={eps_eui_16:.4f}, "
              f"order_cn={cn['order']:.2f}, order_eui={eui['order']:.2f})")
    failures = [k for k, v in checks.items() if not v]
    _report(6, "end-to-end benchmark at desk scale", not failures,
            detail + ("; failed: " + "; ".join(failures) if failures else ""))


def test_criterion_9_reproducibility(bm_study, tmp_path):
    rerun = run_convergence_study(_criterion6_config(str(tmp_path / "rerun")))
    same = True
    for key in ("results", "summary_csv"):
        with open(bm_study.paths[key], "rb") as fa, open(rerun.paths[key], "rb") as fb:
            same = same and fa.read() == fb.read()
    _report(9, "identical result CSVs across two executions", same)


# -- 7 -----------------------------------------------------------------------


def test_criterion_7_cir_problem():
    config = ExperimentConfig(
        problem="cir-cos",
        schemes=("cn", "euler_implicit"),
        steps=(4, 8),
        batch=4000,
        ntest=3,
        seed=42,
        out_dir="/tmp/bsderk_cir_acceptance",
        workers=WORKERS,
    )
    res = run_convergence_study(config)
    cn = res.summary["cn"]
    eui = res.summary["euler_implicit"]
    eps_cn_8 = cn["eps"][cn["N"].index(8)]
    eps_eui_8 = eui["eps"][eui["N"].index(8)]
    ok = np.isfinite(eps_cn_8) and np.isfinite(eps_eui_8) and eps_cn_8 < eps_eui_8
    _report(7, "square-root-diffusion problem at reduced scale", ok,
            f"(eps_cn8={eps_cn_8:.4f} < eps_eui8={eps_eui_8:.4f})")


# -- 8 -----------------------------------------------------------------------


def test_criterion_8_degenerate_driver_exactness():
    mu, sigma, x0 = 0.3, 1.0, 1.0
    problem = linear_1d_problem(mu=mu, sigma=sigma, x0=x0, alpha=0.0, beta=0.0)
    target = x0 + mu * problem.horizon
    batch = 1000
    # the trained value should sit within the Monte Carlo uncertainty of a
    # single training batch of the terminal value
    mc_se = sigma * np.sqrt(problem.horizon) / np.sqrt(batch)
    failures = []
    details = []
    for name in ("euler_implicit", "euler_explicit", "cn", "rk2", "rk3"):
        scheme = scheme_by_name(name)
        vals = [
            backward_solve(problem, scheme, 2, batch_size=batch, seed=300 + r).y0
            for r in range(2)
        ]
        err = abs(float(np.mean(vals)) - target)
        details.append(f"{name}={err:.4f}")
        if err > 3 * mc_se:
            failures.append(f"{name}: |y0 - {target}| = {err:.4f} > {3 * mc_se:.4f}")
    _report(8, "driver-free exactness across all five schemes", not failures,
            "(" + ", ".join(details) + ") " + "; ".join(failures))
