import numpy as np
import pytest
from numpy.polynomial.hermite import hermgauss
from scipy.interpolate import CubicSpline

from bsderk.oracle import (
    OracleConfig,
    OracleError,
    empirical_order,
    quadrature_solve,
    saturation_prefix,
)
from bsderk.problems import cir_cos_problem, cos_1d_problem, linear_1d_problem
from bsderk.tableaux import (
    crank_nicolson_tableau,
    rk2_tableau,
    rk3_tableau,
    theta_tableau,
)

ALL_TABLEAUX = [
    theta_tableau(1.0),
    theta_tableau(0.0),
    crank_nicolson_tableau(),
    rk2_tableau(0.5),
    rk3_tableau(0.3, 0.7),
]


def test_gauss_hermite_polynomial_exactness():
    nodes, wts = hermgauss(32)
    x = np.sqrt(2.0) * nodes
    w = wts / np.sqrt(np.pi)
    # standard-normal moments up to the quadrature's exactness degree
    moment = 1.0
    for k in range(0, 32, 2):
        if k > 0:
            moment *= k - 1  # (k-1)!! recursion for even moments
        est = float(np.sum(w * x**k))
        assert est == pytest.approx(moment, rel=1e-12, abs=1e-12)
        # odd moments vanish by symmetry; large powers amplify roundoff of
        # the cancelling tail terms, so bound them relative to that scale
        odd = float(np.sum(w * x ** (k + 1)))
        cancel_scale = float(np.sum(w * np.abs(x) ** (k + 1)))
        assert abs(odd) < 1e-12 * max(1.0, cancel_scale)


@pytest.mark.parametrize("tableau", ALL_TABLEAUX, ids=lambda t: t.kind + str(t.n_stages))
def test_martingale_preserved_exactly(tableau):
    problem = linear_1d_problem(mu=0.0, sigma=1.0, x0=0.5, alpha=0.0, beta=0.0)
    for n in (1, 4):
        res = quadrature_solve(problem, tableau, n)
        assert res.y0 == pytest.approx(0.5, abs=1e-10)


def test_single_step_explicit_euler_hand_value():
    # f = y, g(x) = x, one unit step: Y0 = (1 + h) E[X_T] = 2 x0
    problem = linear_1d_problem(mu=0.0, sigma=1.0, x0=1.0, alpha=1.0, beta=0.0)
    res = quadrature_solve(problem, theta_tableau(0.0), 1)
    assert res.y0 == pytest.approx(2.0, abs=1e-8)


def test_orders_on_smooth_problem():
    problem = cos_1d_problem()
    config = OracleConfig(n_nodes=800)
    ladder = [4, 8, 16, 32]
    fit_cn = empirical_order(problem, crank_nicolson_tableau(), ladder, config)
    assert 1.7 < fit_cn.slope < 2.3
    fit_eui = empirical_order(problem, theta_tableau(1.0), ladder, config)
    assert 0.8 < fit_eui.slope < 1.2


def test_richardson_self_consistency():
    problem = cos_1d_problem()
    base = quadrature_solve(problem, crank_nicolson_tableau(), 8)
    fine = quadrature_solve(problem, crank_nicolson_tableau(), 8,
                            OracleConfig(n_nodes=900, gh_order=48))
    assert abs(base.y0 - fine.y0) < 1e-6
    mart = linear_1d_problem(mu=0.0, sigma=1.0, x0=0.0, alpha=0.0, beta=0.0)
    base_m = quadrature_solve(mart, crank_nicolson_tableau(), 8)
    fine_m = quadrature_solve(mart, crank_nicolson_tableau(), 8,
                              OracleConfig(n_nodes=900, gh_order=48))
    assert abs(base_m.y0 - fine_m.y0) < 1e-10


def _direct_implicit_euler(problem, n_steps, with_driver_in_z, n_nodes=400,
                           gh_order=32):
    """Transcription of the one-stage implicit recursion, coded independently."""
    x0 = float(problem.forward.x0[0])
    mu = float(problem.forward.mu[0])
    sig = float(problem.forward.sigma[0])
    T = problem.horizon
    h = T / n_steps
    half = 8.0 * sig * np.sqrt(T)
    xs = np.linspace(x0 - half, x0 + half, n_nodes)
    gx, gw = hermgauss(gh_order)
    gx = np.sqrt(2.0) * gx
    gw = gw / np.sqrt(np.pi)
    y = problem.terminal(xs[:, None])
    z = problem.terminal_grad_sigma(xs[:, None])[:, 0]
    for n in range(n_steps - 1, -1, -1):
        t_n = n * h
        sp_y = CubicSpline(xs, y)
        pts = np.clip(xs[:, None] + mu * h + sig * np.sqrt(h) * gx[None, :],
                      xs[0], xs[-1])
        vals = sp_y(pts)
        ey = vals @ gw
        z_new = (vals * gx[None, :]) @ gw / np.sqrt(h)
        if with_driver_in_z:
            f_next = problem.driver(t_n + h, xs[:, None], y, z[:, None])
            sp_f = CubicSpline(xs, f_next)
            fv = sp_f(pts)
            z_new = z_new + h * (fv * gx[None, :]) @ gw / np.sqrt(h)
        y_new = ey.copy()
        for _ in range(300):
            cand = ey + h * problem.driver(t_n, xs[:, None], y_new, z_new[:, None])
            if np.max(np.abs(cand - y_new)) < 1e-14:
                y_new = cand
                break
            y_new = cand
        y, z = y_new, z_new
    return float(CubicSpline(xs, y)(x0))


def test_theta_one_equals_direct_implicit_euler():
    problem = cos_1d_problem()
    tab = theta_tableau(1.0)
    # weight-matrix form against the direct coding with the driver term
    mine = quadrature_solve(problem, tab, 8).y0
    direct = _direct_implicit_euler(problem, 8, with_driver_in_z=True)
    assert mine == pytest.approx(direct, abs=1e-12)
    # regression form against the classical driver-free coding
    mine_reg = quadrature_solve(problem, tab, 8,
                                regression_z_stages=frozenset({1})).y0
    direct_classic = _direct_implicit_euler(problem, 8, with_driver_in_z=False)
    assert mine_reg == pytest.approx(direct_classic, abs=1e-12)
    # the two one-stage implicit variants genuinely differ at finite h
    assert abs(mine - mine_reg) > 1e-3


def test_order_fit_requires_three_points():
    with pytest.raises(OracleError):
        empirical_order(cos_1d_problem(), crank_nicolson_tableau(), [4, 8])


def test_oracle_rejects_bad_inputs():
    with pytest.raises(OracleError):
        quadrature_solve(cir_cos_problem(), crank_nicolson_tableau(), 4)
    narrow = OracleConfig(domain=(0.5, 1.5))
    with pytest.raises(OracleError):
        quadrature_solve(cos_1d_problem(), crank_nicolson_tableau(), 4, narrow)


def test_fixed_point_divergence_detected():
    # h * a_qq * df/dy = 1.2 > 1: the implicit stage cannot contract
    problem = linear_1d_problem(mu=0.0, sigma=1.0, x0=0.0, alpha=1.2, beta=0.0)
    with pytest.raises(OracleError):
        quadrature_solve(problem, theta_tableau(1.0), 1)


def test_saturation_prefix():
    errors = np.array([1e-2, 1e-3, 1e-4, 9e-5, 8.8e-5])
    used = saturation_prefix(errors, floor=1e-9, min_gain=0.5)
    np.testing.assert_array_equal(used, [True, True, True, False, False])
    used2 = saturation_prefix(np.array([1e-2, 1e-10, 1e-11]), 1e-9, 0.5)
    np.testing.assert_array_equal(used2, [True, False, False])
