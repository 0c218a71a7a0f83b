"""Fixed-step integration and contact-onset detection.

The integrators work on any state that supports ``+`` and scalar ``*``
(floats, numpy arrays), so the same code advances a single run or a
batch of independent runs stacked along an array axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

Derivative = Callable[[float, np.ndarray], np.ndarray]


class IntegrationFault(ArithmeticError):
    """A derivative evaluation produced a non-finite value."""

    def __init__(self, step: int, message: str = "non-finite derivative"):
        super().__init__(f"{message} at step {step}")
        self.step = step
        self.message = message

    def __reduce__(self):
        return type(self), (self.step, self.message)


class Method(str, Enum):
    RK4 = "rk4"
    SEMI_IMPLICIT_EULER = "semi-implicit-euler"


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float = 1e-4
    t_end: float = 1.0
    method: Method = Method.RK4
    # 0 disables the zero-order hold on the control law
    control_period: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not (self.t_end >= self.dt):
            raise ValueError(f"t_end ({self.t_end}) must be >= dt ({self.dt})")
        if self.control_period < 0:
            raise ValueError("control_period must be >= 0")
        if self.n_steps > 50_000_000:
            raise ValueError("t_end/dt is too large for a fixed-step run")

    @property
    def n_steps(self) -> int:
        # tolerate t_end/dt landing a hair below an integer
        return int(math.floor(self.t_end / self.dt + 1e-9))


@dataclass(frozen=True)
class PlantState:
    x: float
    v: float
    a: float = 0.0


def _check(k, step: int):
    if not np.all(np.isfinite(k)):
        raise IntegrationFault(step)
    return k


def rk4_step(f: Derivative, t: float, y, dt: float, step: int = 0):
    k1 = f(t, y)
    k2 = f(t + 0.5 * dt, y + 0.5 * dt * k1)
    k3 = f(t + 0.5 * dt, y + 0.5 * dt * k2)
    k4 = f(t + dt, y + dt * k3)
    # a non-finite stage always leaves the weighted sum non-finite
    incr = _check(k1 + 2.0 * k2 + 2.0 * k3 + k4, step)
    return y + (dt / 6.0) * incr


def semi_implicit_euler_step(f: Derivative, t: float, y, dt: float, step: int = 0):
    """Symplectic Euler for states laid out as consecutive (position, velocity) pairs.

    Velocities are updated first, then positions use the new velocities.
    """
    k = _check(f(t, y), step)
    y_new = np.array(y, dtype=float, copy=True)
    y_new[1::2] = y[1::2] + dt * k[1::2]
    y_new[0::2] = y[0::2] + dt * y_new[1::2]
    return y_new


def integrate_step(f: Derivative, t: float, y, dt: float,
                   method: Method | str = Method.RK4, step: int = 0):
    """Advance ``y`` by one step of size ``dt``.

    Raises IntegrationFault (carrying ``step``) on a non-finite derivative.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    method = Method(method)
    if method is Method.RK4:
        return rk4_step(f, t, y, dt, step)
    return semi_implicit_euler_step(f, t, y, dt, step)


def integrate(f: Derivative, y0, dt: float, n_steps: int, t0: float = 0.0,
              method: Method | str = Method.RK4) -> np.ndarray:
    """Run ``n_steps`` fixed steps and return the stacked states (n_steps+1, ...)."""
    y = np.asarray(y0, dtype=float)
    out = np.empty((n_steps + 1,) + y.shape)
    out[0] = y
    for k in range(n_steps):
        y = integrate_step(f, t0 + k * dt, y, dt, method, step=k)
        out[k + 1] = y
    return out


def detect_contact_onset(gap: Sequence[float], t: Sequence[float]) -> Optional[float]:
    """Time of the first positive to non-positive crossing of ``gap``.

    The crossing is refined by linear interpolation between the bracketing
    samples. A series that starts in contact returns ``t[0]``; a series that
    never reaches zero returns None.
    """
    gap = np.asarray(gap, dtype=float)
    t = np.asarray(t, dtype=float)
    if gap.shape != t.shape:
        raise ValueError("gap and time series must have equal length")
    hits = np.flatnonzero(gap <= 0.0)
    if hits.size == 0:
        return None
    k = int(hits[0])
    if k == 0 or gap[k] == 0.0:
        return float(t[k])
    g0, g1 = gap[k - 1], gap[k]
    return float(t[k - 1] + (t[k] - t[k - 1]) * g0 / (g0 - g1))


def first_contact_index(gap: Sequence[float]) -> Optional[int]:
    hits = np.flatnonzero(np.asarray(gap) <= 0.0)
    return int(hits[0]) if hits.size else None
