"""Runge-Kutta coefficient tableaux for backward time stepping.

A tableau couples ``Q`` computed stages per step through two coefficient
matrices: ``a`` weighs the driver terms of the value update (its diagonal
makes a stage implicit) and ``alpha`` weighs the stochastic-weighted driver
terms of the gradient update.  Arrays are 0-indexed: row ``q`` and column
``k`` hold the coefficient coupling stage ``q`` to the instance ``k`` of
:class:`~bsderk.grids.TimeGrid`, so row 0 (the ``t_{n+1}`` endpoint) is all
zeros and only rows ``1 .. Q`` carry coefficients.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

SCHEME_KINDS = (
    "euler_implicit",
    "euler_explicit",
    "theta",
    "crank_nicolson",
    "rk2",
    "rk3",
)

#: absolute tolerance for algebraic identities between double-precision
#: rational coefficient expressions
ALGEBRA_TOL = 1e-12


class TableauError(ValueError):
    """Invalid tableau parameters."""


@dataclass(frozen=True)
class RKTableau:
    """Coefficients of one scheme: abscissae ``c`` and matrices ``a, alpha``.

    ``c`` has length ``Q + 1`` with ``c[0] = 0`` and ``c[Q] = 1``.  ``a`` is
    lower triangular (diagonal allowed: implicit stages), ``alpha`` strictly
    lower triangular.  Entries pairing two instances with equal abscissae
    carry no stochastic weight and the corresponding ``alpha`` entry is zero.
    """

    kind: str
    c: np.ndarray
    a: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise TableauError(f"unknown scheme kind {self.kind!r}")
        c = np.asarray(self.c, dtype=float)
        a = np.asarray(self.a, dtype=float)
        alpha = np.asarray(self.alpha, dtype=float)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "alpha", alpha)
        s = c.size
        if a.shape != (s, s) or alpha.shape != (s, s):
            raise TableauError("coefficient matrices must be (Q+1, Q+1)")
        if c[0] != 0.0 or c[-1] != 1.0 or c[1] <= 0 or np.any(np.diff(c) < 0):
            raise TableauError(f"invalid abscissae {c}")
        # repeated interior abscissae have no usable stochastic weight;
        # only the boundary value 1 may repeat (handled via indicators)
        rep = (np.diff(c) == 0) & (c[1:] != 1.0)
        if np.any(rep):
            raise TableauError(f"repeated interior abscissae in {c}")
        if np.any(a[0] != 0) or np.any(alpha[0] != 0):
            raise TableauError("row 0 must be zero")
        if np.any(np.triu(a, 1) != 0) or np.any(np.triu(alpha, 0) != 0):
            raise TableauError("a must be lower, alpha strictly lower triangular")

    @property
    def n_stages(self) -> int:
        return self.c.size - 1

    def row_sums_ok(self, tol: float = ALGEBRA_TOL) -> bool:
        return not check_row_sums(self, tol)

    def is_explicit(self) -> bool:
        return bool(np.all(np.diag(self.a) == 0))

    def max_diag(self) -> float:
        """Largest implicit coefficient, drives the well-posedness bound."""
        return float(np.max(np.abs(np.diag(self.a)))) if self.c.size else 0.0

    def to_json(self) -> str:
        return json.dumps(
            {
                "Q": self.n_stages,
                "c": self.c.tolist(),
                "a": self.a.tolist(),
                "alpha": self.alpha.tolist(),
                "kind": self.kind,
            }
        )

    @staticmethod
    def from_json(text: str) -> "RKTableau":
        obj = json.loads(text)
        tab = RKTableau(
            kind=obj["kind"],
            c=np.array(obj["c"], dtype=float),
            a=np.array(obj["a"], dtype=float),
            alpha=np.array(obj["alpha"], dtype=float),
        )
        if tab.n_stages != obj["Q"]:
            raise TableauError("stage count mismatch in serialized tableau")
        return tab


@dataclass
class ValidationReport:
    """Outcome of an order-condition check."""

    order: int
    violations: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations


def theta_tableau(theta: float) -> RKTableau:
    """One-stage scheme blending explicit (theta=0) and implicit (theta=1) steps."""
    if not 0.0 <= theta <= 1.0:
        raise TableauError(f"theta must lie in [0, 1], got {theta}")
    c = np.array([0.0, 1.0])
    a = np.array([[0.0, 0.0], [1.0 - theta, theta]])
    alpha = np.array([[0.0, 0.0], [1.0, 0.0]])
    kind = {0.0: "euler_explicit", 1.0: "euler_implicit"}.get(theta, "theta")
    return RKTableau(kind=kind, c=c, a=a, alpha=alpha)


def crank_nicolson_tableau() -> RKTableau:
    """One-stage trapezoidal scheme: a = (1/2, 1/2), alpha = 1."""
    c = np.array([0.0, 1.0])
    a = np.array([[0.0, 0.0], [0.5, 0.5]])
    alpha = np.array([[0.0, 0.0], [1.0, 0.0]])
    return RKTableau(kind="crank_nicolson", c=c, a=a, alpha=alpha)


def rk2_tableau(c2: float) -> RKTableau:
    """Two-stage explicit scheme with free abscissa ``c2`` in (0, 1]."""
    if not 0.0 < c2 <= 1.0:
        raise TableauError(f"c2 must lie in (0, 1], got {c2}")
    c = np.array([0.0, c2, 1.0])
    a = np.zeros((3, 3))
    a[1, 0] = c2
    a[2, 0] = 1.0 - 1.0 / (2.0 * c2)
    a[2, 1] = 1.0 / (2.0 * c2)
    alpha = np.tril(a, -1)
    if c2 == 1.0:
        # both row-2 instances sit at t_n: the weight pairing them does not
        # exist, so the whole stochastic row loads on the full-step weight
        alpha[2, 0] = 1.0
        alpha[2, 1] = 0.0
    return RKTableau(kind="rk2", c=c, a=a, alpha=alpha)


def rk3_tableau(c2: float, c3: float) -> RKTableau:
    """Three-stage explicit scheme with abscissae ``0 < c2 < c3 <= 1``.

    ``c2 = 2/3`` is excluded (degenerate interior coefficients).  The final
    row's first coefficient is fixed by the weight-sum identity
    ``a[3,0] + a[3,1] + a[3,2] = 1`` of the order-3 conditions.
    """
    if not (0.0 < c2 < c3 <= 1.0):
        raise TableauError(f"need 0 < c2 < c3 <= 1, got c2={c2}, c3={c3}")
    if abs(2.0 - 3.0 * c2) < 1e-14:
        raise TableauError("c2 = 2/3 is degenerate for the 3-stage scheme")
    c = np.array([0.0, c2, c3, 1.0])
    a = np.zeros((4, 4))
    a[1, 0] = c2
    a[2, 0] = c3 * (3.0 * c2 - 3.0 * c2 * c2 - c3) / (c2 * (2.0 - 3.0 * c2))
    a[2, 1] = c3 * (c3 - c2) / (c2 * (2.0 - 3.0 * c2))
    a[3, 1] = (3.0 * c3 - 2.0) / (6.0 * c2 * (c3 - c2))
    a[3, 2] = (2.0 - 3.0 * c2) / (6.0 * c3 * (c3 - c2))
    a[3, 0] = 1.0 - a[3, 1] - a[3, 2]
    alpha = np.tril(a, -1)
    if c3 == 1.0:
        # c3 coincides with the endpoint: its stochastic weight is dropped
        # and the remaining row must satisfy sum = 1 and alpha[3,1]*c2 = 1/2
        alpha[3, 1] = 1.0 / (2.0 * c2)
        alpha[3, 0] = 1.0 - alpha[3, 1]
        alpha[3, 2] = 0.0
    return RKTableau(kind="rk3", c=c, a=a, alpha=alpha)


def _indicator_row_sum(tab: RKTableau, q: int) -> float:
    """Sum of alpha row ``q`` restricted to instances strictly below ``c[q]``."""
    mask = tab.c[:q] < tab.c[q]
    return float(np.sum(tab.alpha[q, :q][mask]))


def check_row_sums(tab: RKTableau, tol: float = ALGEBRA_TOL) -> list[str]:
    """Structural consistency of both matrices against the abscissae."""
    bad = []
    for q in range(1, tab.n_stages + 1):
        sa = float(np.sum(tab.a[q, : q + 1]))
        if abs(sa - tab.c[q]) > tol:
            bad.append(f"row-sum a: sum_k a[{q},k] = {sa} != c[{q}] = {tab.c[q]}")
        salpha = _indicator_row_sum(tab, q)
        if abs(salpha - tab.c[q]) > tol:
            bad.append(
                f"row-sum alpha: sum_k alpha[{q},k]*[c_k<c_q] = {salpha}"
                f" != c[{q}] = {tab.c[q]}"
            )
    return bad


def validate_order_conditions(
    tab: RKTableau, order: int, tol: float = ALGEBRA_TOL
) -> ValidationReport:
    """Check the exact equality set granting the requested convergence order.

    Raises :class:`TableauError` when the order is not attainable with the
    tableau's stage count; otherwise returns a report listing every violated
    identity (empty list means pass).
    """
    q_stages = tab.n_stages
    admissible = {1: (1,), 2: (1, 2), 3: (3,)}
    if order not in admissible:
        raise TableauError(f"order must be 1, 2 or 3, got {order}")
    if q_stages not in admissible[order]:
        raise TableauError(
            f"order {order} needs Q in {admissible[order]}, tableau has Q={q_stages}"
        )

    bad = check_row_sums(tab, tol)
    a, alpha, c = tab.a, tab.alpha, tab.c

    def eq(lhs, rhs, label):
        if abs(lhs - rhs) > tol:
            bad.append(f"{label}: {lhs} != {rhs}")

    if order == 1:
        eq(a[1, 0] + a[1, 1], 1.0, "a21+a22 = 1 at q=2")
    elif order == 2 and q_stages == 1:
        eq(a[1, 0], 0.5, "a21 = 1/2")
        eq(a[1, 1], 0.5, "a22 = 1/2")
        eq(alpha[1, 0], 1.0, "alpha21 = 1")
    elif order == 2:
        eq(a[1, 1], 0.0, "a22 = 0")
        eq(a[2, 2], 0.0, "a33 = 0")
        eq(a[1, 0], c[1], "a21 = c2")
        eq(a[2, 0], 1.0 - 1.0 / (2.0 * c[1]), "a31 = 1 - 1/(2 c2)")
        eq(a[2, 1], 1.0 / (2.0 * c[1]), "a32 = 1/(2 c2)")
        ind = 1.0 if c[1] < 1.0 else 0.0
        eq(alpha[2, 0] + alpha[2, 1] * ind, 1.0, "alpha31 + alpha32*[c2<1] = 1")
    else:
        c2, c3 = c[1], c[2]
        if not (0.0 < c2 < c3 <= 1.0) or (c3 == 1.0 and abs(c2 - 2.0 / 3.0) < tol):
            bad.append(f"inadmissible abscissae c2={c2}, c3={c3}")
        for q in (1, 2, 3):
            eq(a[q, q], 0.0, f"a[{q + 1},{q + 1}] = 0")
        eq(a[3, 0] + a[3, 1] + a[3, 2], 1.0, "a41+a42+a43 = 1")
        eq(a[3, 1] * c2 + a[3, 2] * c3, 0.5, "a42 c2 + a43 c3 = 1/2")
        eq(a[3, 1] * c2**2 + a[3, 2] * c3**2, 1.0 / 3.0, "a42 c2^2 + a43 c3^2 = 1/3")
        eq(a[3, 2] * a[2, 1] * c2, 1.0 / 6.0, "a43 a32 c2 = 1/6")
        eq(a[3, 2] * alpha[2, 1] * c2, 1.0 / 6.0, "a43 alpha32 c2 = 1/6")
        ind = 1.0 if c3 < 1.0 else 0.0
        eq(
            alpha[3, 0] + alpha[3, 1] + alpha[3, 2] * ind,
            1.0,
            "alpha41 + alpha42 + alpha43*[c3<1] = 1",
        )
        eq(
            alpha[3, 1] * c2 + alpha[3, 2] * c3 * ind,
            0.5,
            "alpha42 c2 + alpha43 c3*[c3<1] = 1/2",
        )
    return ValidationReport(order=order, violations=bad)
