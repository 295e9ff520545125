"""Fixed-step classical Runge-Kutta 4 integration of flat-state ODEs.

The integrator is deliberately ignorant of flow semantics: the state is one
flat float64 vector and callers pack/unpack whatever augmented structure
they need.  Reverse-time integration is encoded by a grid with t1 < t0
(negative step).  There is no adaptivity; fixed steps make the gradient
identities elsewhere in the package exact-to-roundoff questions instead of
tolerance negotiations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["TimeGrid", "IntegrationError", "rk4_step", "integrate"]


class IntegrationError(RuntimeError):
    """Raised when a derivative evaluation produces non-finite values."""

    def __init__(self, t: float, index: int):
        self.t = float(t)
        self.index = int(index)
        super().__init__(
            f"non-finite derivative at t={t!r} (state index {index})"
        )


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid from t0 to t1 in n_steps steps (t1 < t0 means reverse)."""

    t0: float
    t1: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.t0 == self.t1:
            raise ValueError("t0 and t1 must differ")

    @property
    def h(self) -> float:
        return (self.t1 - self.t0) / self.n_steps

    def reversed(self) -> "TimeGrid":
        return TimeGrid(self.t1, self.t0, self.n_steps)


def _check_finite(k: np.ndarray, t: float) -> None:
    # np.sum is a cheap whole-array probe: any inf/nan makes it non-finite
    if not np.isfinite(np.sum(k)):
        bad = np.flatnonzero(~np.isfinite(k))
        raise IntegrationError(t, int(bad[0]) if bad.size else -1)


def rk4_step(deriv, s: np.ndarray, t: float, h: float) -> np.ndarray:
    """One classical RK4 update with stage weights 1/6, 1/3, 1/3, 1/6."""
    k1 = np.asarray(deriv(s, t))
    _check_finite(k1, t)
    k2 = np.asarray(deriv(s + 0.5 * h * k1, t + 0.5 * h))
    _check_finite(k2, t + 0.5 * h)
    k3 = np.asarray(deriv(s + 0.5 * h * k2, t + 0.5 * h))
    _check_finite(k3, t + 0.5 * h)
    k4 = np.asarray(deriv(s + h * k3, t + h))
    _check_finite(k4, t + h)
    return s + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(deriv, s0: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """Compose n_steps RK4 steps from grid.t0 to grid.t1.

    Pure function of (deriv, s0, grid); only the current state is retained,
    so memory is constant in n_steps.
    """
    s = np.array(s0, dtype=np.float64, copy=True)
    h = grid.h
    t = grid.t0
    sixth = h / 6.0
    for i in range(grid.n_steps):
        # inline RK4 with a single cheap finiteness probe per step; the
        # stage-level localization of rk4_step is re-run only on failure
        k1 = deriv(s, t)
        k2 = deriv(s + 0.5 * h * k1, t + 0.5 * h)
        k3 = deriv(s + 0.5 * h * k2, t + 0.5 * h)
        k4 = deriv(s + h * k3, t + h)
        upd = sixth * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.isfinite(np.sum(upd)):
            rk4_step(deriv, s, t, h)  # raises IntegrationError with details
            raise IntegrationError(t, -1)  # pragma: no cover (fallback)
        s = s + upd
        t = grid.t0 + (i + 1) * h
    return s
