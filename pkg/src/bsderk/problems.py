"""Benchmark problems: forward dynamics, driver, terminal data, exact solutions.

Drivers and exact solutions are hard coded together with the hand-derived
partial derivatives the loss gradients and residual checks need; there is no
symbolic machinery.  All callables are vectorized over a batch axis:
``x`` is ``(B, d)``, ``y`` is ``(B,)``, ``z`` is ``(B, d)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .stochastics import ForwardModel, cir_model, drifted_bm_model


class ProblemError(ValueError):
    """Invalid problem parameters."""


@dataclass
class BSDEProblem:
    name: str
    dim: int
    horizon: float
    forward: ForwardModel
    driver: Callable  # f(t, x, y, z) -> (B,)
    driver_dy: Callable  # df/dy -> (B,)
    driver_dz: Callable  # df/dz -> (B, d)
    terminal: Callable  # g(x) -> (B,)
    terminal_grad_sigma: Callable  # sigma(x)^T grad g(x) -> (B, d)
    lipschitz_k: float  # driver Lipschitz estimate near the solution range
    exact_u: Optional[Callable] = None  # u(t, x) -> (B,)
    exact_z: Optional[Callable] = None  # z(t, x) -> (B, d)
    pde_residual: Optional[Callable] = None  # (t, x) -> (B,), should be ~0

    @property
    def has_exact(self) -> bool:
        return self.exact_u is not None

    def exact_y0(self) -> float:
        if not self.has_exact:
            raise ProblemError(f"problem {self.name!r} has no exact solution")
        return float(self.exact_u(0.0, self.forward.x0[None, :])[0])


def bm_cos_problem(dim: int = 10, horizon: float = 1.0) -> BSDEProblem:
    """Drifted Brownian forward with cosine terminal data and quadratic driver.

    Solution ``u(t, x) = cos(xbar) * exp((T - t) / 2)`` with
    ``xbar = sum_i x_i``; the driver couples ``y`` and ``z`` through the
    square of ``y * (z . 1)`` and cancels exactly along the solution.
    """
    d, T = dim, horizon
    mu = (0.2 / d) * np.ones(d)
    sig = 1.0 / np.sqrt(d)
    model = drifted_bm_model(x0=np.ones(d), mu=mu, sigma=sig * np.ones(d))

    def xbar(x):
        return np.sum(x, axis=-1)

    def driver(t, x, y, z):
        xb = xbar(x)
        e = np.exp((T - t) / 2.0)
        s = np.sum(z, axis=-1)
        return (
            (np.cos(xb) + 0.2 * np.sin(xb)) * e
            - 0.5 * (np.sin(xb) * np.cos(xb) * e * e) ** 2
            + (1.0 / (2.0 * d)) * (y * s) ** 2
        )

    def driver_dy(t, x, y, z):
        s = np.sum(z, axis=-1)
        return (y * s * s) / d

    def driver_dz(t, x, y, z):
        s = np.sum(z, axis=-1)
        return np.repeat(((y * y * s) / d)[:, None], d, axis=1)

    def terminal(x):
        return np.cos(xbar(x))

    def terminal_grad_sigma(x):
        return -sig * np.sin(xbar(x))[:, None] * np.ones((1, d))

    def exact_u(t, x):
        return np.cos(xbar(x)) * np.exp((T - t) / 2.0)

    def exact_z(t, x):
        return -sig * (np.sin(xbar(x)) * np.exp((T - t) / 2.0))[:, None] * np.ones((1, d))

    def pde_residual(t, x):
        xb = xbar(x)
        e = np.exp((T - t) / 2.0)
        u_t = -0.5 * np.cos(xb) * e
        drift = -0.2 * np.sin(xb) * e  # mu . grad u, mu sums to 0.2
        diff = -0.5 * np.cos(xb) * e  # (1/2) tr(sigma sigma^T hess u)
        f = driver(t, x, exact_u(t, x), exact_z(t, x))
        return u_t + drift + diff + f

    return BSDEProblem(
        name="bm-cos",
        dim=d,
        horizon=T,
        forward=model,
        driver=driver,
        driver_dy=driver_dy,
        driver_dz=driver_dz,
        terminal=terminal,
        terminal_grad_sigma=terminal_grad_sigma,
        lipschitz_k=1.5,
        exact_u=exact_u,
        exact_z=exact_z,
        pde_residual=pde_residual,
    )


def cir_cos_problem(dim: int = 10, horizon: float = 1.0) -> BSDEProblem:
    """Square-root diffusion forward with the same cosine solution surface.

    Coordinatewise mean reversion ``dX = (1/(5d)) (3 - X) dt +
    (1/sqrt(d)) sqrt(X) dW``; the driver ignores ``z`` and cancels the
    generator of the square-root diffusion along the solution.
    """
    d, T = dim, horizon
    a = 1.0 / (5.0 * d)
    b = 3.0
    sc = 1.0 / np.sqrt(d)
    model = cir_model(x0=10.0 * np.ones(d), a=a, b=b, sigma_cir=sc)

    def xbar(x):
        return np.sum(x, axis=-1)

    def ftilde(t, x):
        xb = xbar(x)
        e = np.exp((T - t) / 2.0)
        return (0.5 * np.cos(xb) * (1.0 + xb / d) + np.sin(xb) * (0.6 - xb / (5.0 * d))) * e

    def driver(t, x, y, z):
        xb = xbar(x)
        e = np.exp((T - t) / 2.0)
        return ftilde(t, x) + 0.2 * (np.sin(xb) * e) ** 2 * (y * y - np.cos(xb) ** 2 * e * e)

    def driver_dy(t, x, y, z):
        xb = xbar(x)
        e = np.exp((T - t) / 2.0)
        return 0.4 * (np.sin(xb) * e) ** 2 * y

    def driver_dz(t, x, y, z):
        return np.zeros_like(z)

    def terminal(x):
        return np.cos(xbar(x))

    def terminal_grad_sigma(x):
        return -np.sqrt(np.maximum(x, 0.0) / d) * np.sin(xbar(x))[:, None]

    def exact_u(t, x):
        return np.cos(xbar(x)) * np.exp((T - t) / 2.0)

    def exact_z(t, x):
        return -np.sqrt(np.maximum(x, 0.0) / d) * (np.sin(xbar(x)) * np.exp((T - t) / 2.0))[:, None]

    def pde_residual(t, x):
        xb = xbar(x)
        e = np.exp((T - t) / 2.0)
        u_t = -0.5 * np.cos(xb) * e
        drift = -a * (b * d - xb) * np.sin(xb) * e
        diff = -0.5 * (xb / d) * np.cos(xb) * e
        f = driver(t, x, exact_u(t, x), exact_z(t, x))
        return u_t + drift + diff + f

    return BSDEProblem(
        name="cir-cos",
        dim=d,
        horizon=T,
        forward=model,
        driver=driver,
        driver_dy=driver_dy,
        driver_dz=driver_dz,
        terminal=terminal,
        terminal_grad_sigma=terminal_grad_sigma,
        lipschitz_k=1.6,
        exact_u=exact_u,
        exact_z=exact_z,
        pde_residual=pde_residual,
    )


def linear_1d_problem(
    mu: float = 0.2,
    sigma: float = 1.0,
    x0: float = 1.0,
    horizon: float = 1.0,
    alpha: float = 0.0,
    beta: float = 0.0,
) -> BSDEProblem:
    """1-d drifted Brownian problem with affine driver and identity terminal.

    ``f = alpha * y + beta * z`` gives the closed form
    ``u(t, x) = exp(alpha (T - t)) (x + (mu + beta sigma) (T - t))``.
    """
    T = horizon
    model = drifted_bm_model(
        x0=np.array([x0]), mu=np.array([mu]), sigma=np.array([sigma])
    )
    gam = mu + beta * sigma

    def driver(t, x, y, z):
        return alpha * y + beta * z[:, 0]

    def driver_dy(t, x, y, z):
        return np.full(y.shape, alpha)

    def driver_dz(t, x, y, z):
        return np.full_like(z, beta)

    def terminal(x):
        return x[:, 0]

    def terminal_grad_sigma(x):
        return np.full_like(x, sigma)

    def exact_u(t, x):
        return np.exp(alpha * (T - t)) * (x[:, 0] + gam * (T - t))

    def exact_z(t, x):
        return np.full_like(x, sigma * np.exp(alpha * (T - t)))

    def pde_residual(t, x):
        u = exact_u(t, x)
        u_t = -alpha * u - np.exp(alpha * (T - t)) * gam
        ex = np.exp(alpha * (T - t))
        return u_t + mu * ex + alpha * u + beta * sigma * ex

    return BSDEProblem(
        name="linear-1d",
        dim=1,
        horizon=T,
        forward=model,
        driver=driver,
        driver_dy=driver_dy,
        driver_dz=driver_dz,
        terminal=terminal,
        terminal_grad_sigma=terminal_grad_sigma,
        lipschitz_k=abs(alpha) + abs(beta) + 1e-9,
        exact_u=exact_u,
        exact_z=exact_z,
        pde_residual=pde_residual,
    )


def cos_1d_problem(
    mu: float = 0.2,
    sigma: float = 1.0,
    x0: float = 1.0,
    horizon: float = 1.0,
    kappa: float = 0.5,
) -> BSDEProblem:
    """Smooth nonlinear 1-d problem with known solution, for order studies.

    ``u(t, x) = cos(x) exp((T - t) / 2)`` with a driver whose nonlinear part
    ``kappa * (y z + sigma sin(x) cos(x) exp(T - t))`` vanishes on the
    solution.
    """
    T = horizon
    model = drifted_bm_model(
        x0=np.array([x0]), mu=np.array([mu]), sigma=np.array([sigma])
    )

    def driver(t, x, y, z):
        xs = x[:, 0]
        e = np.exp((T - t) / 2.0)
        lin = (0.5 * (1.0 + sigma**2) * np.cos(xs) + mu * np.sin(xs)) * e
        return lin + kappa * (y * z[:, 0] + sigma * np.sin(xs) * np.cos(xs) * e * e)

    def driver_dy(t, x, y, z):
        return kappa * z[:, 0]

    def driver_dz(t, x, y, z):
        return kappa * y[:, None]

    def terminal(x):
        return np.cos(x[:, 0])

    def terminal_grad_sigma(x):
        return -sigma * np.sin(x)

    def exact_u(t, x):
        return np.cos(x[:, 0]) * np.exp((T - t) / 2.0)

    def exact_z(t, x):
        return -sigma * np.sin(x) * np.exp((T - t) / 2.0)

    def pde_residual(t, x):
        xs = x[:, 0]
        e = np.exp((T - t) / 2.0)
        u_t = -0.5 * np.cos(xs) * e
        drift = -mu * np.sin(xs) * e
        diff = -0.5 * sigma**2 * np.cos(xs) * e
        f = driver(t, x, exact_u(t, x), exact_z(t, x))
        return u_t + drift + diff + f

    return BSDEProblem(
        name="cos-1d",
        dim=1,
        horizon=T,
        forward=model,
        driver=driver,
        driver_dy=driver_dy,
        driver_dz=driver_dz,
        terminal=terminal,
        terminal_grad_sigma=terminal_grad_sigma,
        lipschitz_k=kappa * 3.0 + 1e-9,
        exact_u=exact_u,
        exact_z=exact_z,
        pde_residual=pde_residual,
    )


_FACTORIES = {
    "bm-cos": bm_cos_problem,
    "cir-cos": cir_cos_problem,
    "linear-1d": linear_1d_problem,
    "cos-1d": cos_1d_problem,
}


def problem_by_name(name: str, **kwargs) -> BSDEProblem:
    """Look up a built-in problem; plug-in point for user problems."""
    if name not in _FACTORIES:
        raise ProblemError(f"unknown problem {name!r}; known: {sorted(_FACTORIES)}")
    return _FACTORIES[name](**kwargs)


def register_problem(name: str, factory: Callable[..., BSDEProblem]) -> None:
    _FACTORIES[name] = factory
