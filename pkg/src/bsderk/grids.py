"""Equidistant time grids refined with intermediate per-step instances."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GridError(ValueError):
    """Invalid grid parameters."""


@dataclass(frozen=True)
class TimeGrid:
    """Main grid of ``n_steps`` equal steps plus intermediate instances.

    The step is ``h = horizon / n_steps`` and ``t_n = n * h``.  Within step
    ``n`` the instances are placed at ``t_{n+1} - c[q] * h`` for abscissae
    ``c`` with ``c[0] = 0 < c[1] <= ... <= c[-1] = 1``.  Index ``q = 0``
    is therefore the right endpoint ``t_{n+1}`` and ``q = Q = len(c) - 1``
    the left endpoint ``t_n``; instances glue across steps.
    """

    horizon: float
    n_steps: int
    c: np.ndarray

    def __post_init__(self):
        if self.horizon <= 0:
            raise GridError(f"horizon must be positive, got {self.horizon}")
        if self.n_steps < 1:
            raise GridError(f"n_steps must be >= 1, got {self.n_steps}")
        c = np.asarray(self.c, dtype=float)
        object.__setattr__(self, "c", c)
        if c.ndim != 1 or c.size < 2:
            raise GridError("c must be a vector of length >= 2")
        if c[0] != 0.0 or c[-1] != 1.0:
            raise GridError(f"abscissae must start at 0 and end at 1, got {c}")
        if c[1] <= 0.0:
            raise GridError("second abscissa must be strictly positive")
        if np.any(np.diff(c) < 0):
            raise GridError(f"abscissae must be non-decreasing, got {c}")

    @property
    def h(self) -> float:
        return self.horizon / self.n_steps

    @property
    def n_stages(self) -> int:
        """Number of computed stages Q (instances per step minus one)."""
        return self.c.size - 1

    def t_main(self, n: int) -> float:
        return n * self.h

    def instance(self, n: int, q: int) -> float:
        """Time of instance ``q`` in step ``n`` (``q = 0`` is ``t_{n+1}``)."""
        return (n + 1) * self.h - self.c[q] * self.h

    def instances(self) -> np.ndarray:
        """All instance times, shape ``(n_steps, Q + 1)``."""
        n = np.arange(self.n_steps)[:, None]
        return (n + 1) * self.h - self.c[None, :] * self.h

    def sub_gaps(self) -> np.ndarray:
        """Chronological gaps within one step, ``gap[j] = (c[j+1] - c[j]) * h``.

        Entry ``j`` is the time from instance ``j + 1`` (earlier) to instance
        ``j`` (later); gaps are >= 0 and sum to ``h``.
        """
        return np.diff(self.c) * self.h
