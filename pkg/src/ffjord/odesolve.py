"""Explicit Runge-Kutta integrators with function-evaluation accounting."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

__all__ = [
    "SolverError",
    "StepSizeUnderflowError",
    "NonFiniteDynamicsError",
    "MaxStepsExceededError",
    "ButcherTableau",
    "DORMAND_PRINCE",
    "StepController",
    "SolveResult",
    "integrate",
    "integrate_fixed_rk4",
]


class SolverError(RuntimeError):
    pass


class StepSizeUnderflowError(SolverError):
    """Step size collapsed below floating-point resolution; dynamics are likely stiff."""


class NonFiniteDynamicsError(SolverError, FloatingPointError):
    pass


class MaxStepsExceededError(SolverError):
    pass


@dataclass(frozen=True)
class ButcherTableau:
    c: np.ndarray
    a: np.ndarray
    b: np.ndarray
    b_hat: np.ndarray
    order: int = 5

    def __post_init__(self):
        s = len(self.c)
        if self.a.shape != (s, s) or self.b.shape != (s,) or self.b_hat.shape != (s,):
            raise ValueError("inconsistent tableau shapes")
        if np.any(np.triu(self.a) != 0):
            raise ValueError("coupling matrix must be strictly lower triangular")

    @property
    def stages(self) -> int:
        return len(self.c)


def _dopri5() -> ButcherTableau:
    c = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
    a = np.zeros((7, 7))
    a[1, :1] = [1 / 5]
    a[2, :2] = [3 / 40, 9 / 40]
    a[3, :3] = [44 / 45, -56 / 15, 32 / 9]
    a[4, :4] = [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]
    a[5, :5] = [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]
    a[6, :6] = [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]
    b = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
    b_hat = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
    return ButcherTableau(c=c, a=a, b=b, b_hat=b_hat, order=5)


DORMAND_PRINCE = _dopri5()


@dataclass(frozen=True)
class StepController:
    """Mixed absolute/relative error control for an embedded pair.

    ``first_step`` overrides the default initial step of 1% of the horizon.
    """

    atol: float = 1e-5
    rtol: float = 1e-5
    safety: float = 0.9
    min_factor: float = 0.2
    max_factor: float = 10.0
    first_step: float | None = None
    max_steps: int = 1_000_000

    def __post_init__(self):
        if not (self.atol > 0 and self.rtol > 0):
            raise ValueError("atol and rtol must be positive")
        if not (0 < self.min_factor < 1 < self.max_factor):
            raise ValueError("step clamps must satisfy 0 < min_factor < 1 < max_factor")
        if not 0 < self.safety <= 1:
            raise ValueError("safety factor must lie in (0, 1]")

    @classmethod
    def with_tol(cls, tol: float, **kw) -> "StepController":
        return cls(atol=tol, rtol=tol, **kw)


@dataclass
class SolveResult:
    y: Any
    nfe: int
    accepted: int = 0
    rejected: int = 0
    last_step: float = 0.0
    t: float = 0.0
    stats: dict = field(default_factory=dict)


def _check_finite(k, t):
    data = getattr(k, "data", k)
    if not np.all(np.isfinite(data)):
        raise NonFiniteDynamicsError(f"dynamics returned a non-finite value at t={t!r}")


def integrate(
    dynamics: Callable[[np.ndarray, float], np.ndarray],
    y0,
    t0: float,
    t1: float,
    controller: StepController | None = None,
    tableau: ButcherTableau = DORMAND_PRINCE,
) -> SolveResult:
    """Adaptive embedded Runge-Kutta solve of dy/dt = dynamics(y, t) from t0 to t1.

    Works in either time direction. Every stage is evaluated on every step
    attempt (no first-same-as-last reuse), so ``nfe`` is exactly
    ``stages * (accepted + rejected)``.
    """
    ctrl = controller or StepController()
    y = np.array(getattr(y0, "data", y0), dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise NonFiniteDynamicsError("initial state is not finite")
    t0 = float(t0)
    t1 = float(t1)
    if t0 == t1:
        raise ValueError("t0 and t1 must differ")

    direction = 1.0 if t1 > t0 else -1.0
    span = abs(t1 - t0)
    h = abs(ctrl.first_step) if ctrl.first_step is not None else 0.01 * span
    h = min(h, span)
    a, b, c = tableau.a, tableau.b, tableau.c
    err_w = tableau.b - tableau.b_hat
    s = tableau.stages
    order = min(tableau.order, 5)
    expo = -1.0 / order

    t = t0
    nfe = accepted = rejected = 0
    k = [None] * s
    while direction * (t1 - t) > 0:
        if accepted >= ctrl.max_steps:
            raise MaxStepsExceededError(
                f"exceeded {ctrl.max_steps} accepted steps; dynamics may be stiff"
            )
        remaining = abs(t1 - t)
        last = h >= remaining
        step = remaining if last else h
        if step <= 1e-14 * max(1.0, abs(t)) and not last:
            raise StepSizeUnderflowError(
                f"step size underflow at t={t:.6g} (h={step:.3e}); dynamics are likely stiff"
            )
        hs = direction * step
        for i in range(s):
            yi = y
            for j in range(i):
                if a[i, j] != 0.0:
                    yi = yi + (hs * a[i, j]) * k[j]
            ki = np.asarray(dynamics(yi, t + c[i] * hs), dtype=np.float64)
            nfe += 1
            _check_finite(ki, t + c[i] * hs)
            k[i] = ki
        y_new = y.copy()
        err = np.zeros_like(y)
        for i in range(s):
            if b[i] != 0.0:
                y_new += (hs * b[i]) * k[i]
            if err_w[i] != 0.0:
                err += (hs * err_w[i]) * k[i]
        scale = ctrl.atol + ctrl.rtol * np.maximum(np.abs(y), np.abs(y_new))
        err_norm = float(np.sqrt(np.mean((err / scale) ** 2))) if y.size else 0.0
        if not np.isfinite(err_norm):
            raise NonFiniteDynamicsError("error estimate is not finite")

        if err_norm <= 1.0:
            t = t1 if last else t + hs
            y = y_new
            accepted += 1
            factor = ctrl.max_factor if err_norm == 0.0 else ctrl.safety * err_norm ** expo
            factor = min(ctrl.max_factor, max(ctrl.min_factor, factor))
            h = step * factor
        else:
            rejected += 1
            factor = max(ctrl.min_factor, ctrl.safety * err_norm ** expo)
            h = step * factor
            if h <= 1e-14 * max(1.0, abs(t)):
                raise StepSizeUnderflowError(
                    f"step size underflow at t={t:.6g} (h={h:.3e}); dynamics are likely stiff"
                )
    return SolveResult(y=y, nfe=nfe, accepted=accepted, rejected=rejected, last_step=step, t=t)


def integrate_fixed_rk4(dynamics, y0, t0: float, t1: float, n_steps: int) -> SolveResult:
    """Classical RK4 with ``n_steps`` uniform steps.

    The state only needs ``+`` and scalar ``*``, so arrays and autodiff
    tensors both work; with tensors the whole trajectory stays on the tape.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    h = (float(t1) - float(t0)) / n_steps
    if isinstance(y0, (np.ndarray, list, tuple, float, int)):
        y = np.array(y0, dtype=np.float64)
    else:
        y = y0
    t = float(t0)
    nfe = 0
    for n in range(n_steps):
        t = float(t0) + n * h
        k1 = dynamics(y, t)
        k2 = dynamics(y + (0.5 * h) * k1, t + 0.5 * h)
        k3 = dynamics(y + (0.5 * h) * k2, t + 0.5 * h)
        k4 = dynamics(y + h * k3, t + h)
        nfe += 4
        for kk, tt in ((k1, t), (k2, t + 0.5 * h), (k3, t + 0.5 * h), (k4, t + h)):
            _check_finite(kk, tt)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return SolveResult(y=y, nfe=nfe, accepted=n_steps, rejected=0, last_step=h, t=float(t1))
