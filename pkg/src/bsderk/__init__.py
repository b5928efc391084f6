"""Runge-Kutta time stepping for BSDEs with regression stages.

Library layout:

- :mod:`bsderk.grids` / :mod:`bsderk.tableaux`: time grids and scheme
  coefficient tableaux with algebraic order-condition validation.
- :mod:`bsderk.stochastics`: forward-path simulation on the full instance
  grid, stochastic weights, weak-order probe.
- :mod:`bsderk.problems`: benchmark problems with exact solutions.
- :mod:`bsderk.nets`: small feedforward networks, exact reverse-mode
  gradients, the adaptive optimizer schedule.
- :mod:`bsderk.schemes`: stage losses and the backward training loop.
- :mod:`bsderk.oracle`: deterministic quadrature solver isolating the
  time-discretization error.
- :mod:`bsderk.harness`: experiment configs, convergence/timing/balance
  studies, plotting, used by the ``bsderk`` CLI.
"""

from .grids import TimeGrid
from .oracle import empirical_order, quadrature_solve
from .problems import problem_by_name, register_problem
from .schemes import backward_solve, load_solution, save_solution, scheme_by_name
from .tableaux import (
    RKTableau,
    crank_nicolson_tableau,
    rk2_tableau,
    rk3_tableau,
    theta_tableau,
    validate_order_conditions,
)

__version__ = "0.1.0"

__all__ = [
    "TimeGrid",
    "RKTableau",
    "theta_tableau",
    "crank_nicolson_tableau",
    "rk2_tableau",
    "rk3_tableau",
    "validate_order_conditions",
    "problem_by_name",
    "register_problem",
    "scheme_by_name",
    "backward_solve",
    "save_solution",
    "load_solution",
    "quadrature_solve",
    "empirical_order",
    "__version__",
]
