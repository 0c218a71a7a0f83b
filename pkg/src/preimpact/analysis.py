"""Closed-form contact-transition analysis, design checks and impact metrics.

After contact the virtual force vanishes and the admittance part relaxes
freely from its offset (sigma, nu) to the desired state. With critical
damping that relaxation has a closed form, which in turn gives the extra
transition term of the contact force and its extremum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np
from scipy.linalg import expm

from .controllers import ImpedanceLaw, SecondOrderParams, admittance_accel
from .dynamics import rk4_step


class AnalysisError(ValueError):
    pass


class MetricError(ValueError):
    """A metric was requested from a trace without a contact event."""


def critical_omega(adm: SecondOrderParams, rtol: float = 1e-9) -> float:
    """Natural frequency of a critically damped admittance part.

    The closed forms only hold for zeta = 1, so anything else is rejected.
    """
    if not math.isclose(adm.zeta, 1.0, rel_tol=rtol):
        raise AnalysisError(f"closed-form analysis requires zeta_a = 1, got {adm.zeta:.6g}")
    return adm.omega


@dataclass(frozen=True)
class ContactState:
    """Snapshot at the moment of contact.

    sigma and nu are the admittance offsets x_v - x_d and v_v - v_d;
    eta = nu + omega_a * sigma.
    """

    sigma: float
    nu: float
    eta: float
    x_c: float = 0.0
    v_c: float = 0.0
    a_c: float = 0.0

    @classmethod
    def from_offsets(cls, sigma: float, nu: float, omega_a: float, x_c: float = 0.0,
                     v_c: float = 0.0, a_c: float = 0.0) -> "ContactState":
        return cls(sigma, nu, nu + omega_a * sigma, x_c, v_c, a_c)

    def mirrored(self) -> "ContactState":
        return ContactState(-self.sigma, -self.nu, -self.eta, -self.x_c, -self.v_c, -self.a_c)


def closed_form_y(t, contact: ContactState, omega_a: float, zeta_a: float = 1.0):
    """Free response (y, y_dot, y_ddot) of the admittance offset y = x_v - x_d."""
    if not math.isclose(zeta_a, 1.0, rel_tol=1e-9):
        raise AnalysisError(f"closed-form response requires zeta_a = 1, got {zeta_a}")
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise AnalysisError("closed-form response is defined for t >= 0")
    w, s, nu, eta = omega_a, contact.sigma, contact.nu, contact.eta
    e = np.exp(-w * t)
    y = (eta * t + s) * e
    yd = (-w * eta * t + nu) * e
    ydd = (w * w * eta * t - w * (eta + nu)) * e
    return y, yd, ydd


def _ftra_coeffs(contact: ContactState, imp: SecondOrderParams, omega_a: float):
    A = (imp.D * omega_a - imp.K) * contact.eta
    B = -imp.D * contact.nu - imp.K * contact.sigma
    return A, B


def f_tra(t, contact: ContactState, imp: SecondOrderParams, omega_a: float):
    """Transition term of the contact force, exp(-w t) [A t + B]."""
    A, B = _ftra_coeffs(contact, imp, omega_a)
    t = np.asarray(t, dtype=float)
    return np.exp(-omega_a * t) * (A * t + B)


def f_tra_dot(t, contact: ContactState, imp: SecondOrderParams, omega_a: float):
    A, B = _ftra_coeffs(contact, imp, omega_a)
    w = omega_a
    t = np.asarray(t, dtype=float)
    return np.exp(-w * t) * (-w * A * t + A - w * B)


def f_tra_ddot(t, contact: ContactState, imp: SecondOrderParams, omega_a: float):
    A, B = _ftra_coeffs(contact, imp, omega_a)
    w = omega_a
    t = np.asarray(t, dtype=float)
    return np.exp(-w * t) * (w * w * A * t - 2.0 * w * A + w * w * B)


class TransitionClass(str, Enum):
    LOCAL_MAXIMUM = "local_maximum"
    NO_EXTREMUM = "no_extremum_smooth"
    LOCAL_MINIMUM_POSSIBLE = "local_minimum_possible"
    TRIVIAL = "trivial_t_ex_infinite"


@dataclass(frozen=True)
class Transition:
    kind: TransitionClass
    t_ex: Optional[float] = None


def _normalised(contact: ContactState) -> ContactState:
    vals = (contact.sigma, contact.nu, contact.eta)
    if contact.eta == 0:
        raise AnalysisError("eta = 0: the transition term has no extremum to classify")
    if any(v > 0 for v in vals) and any(v < 0 for v in vals):
        raise AnalysisError("sigma, nu and eta must share a sign at contact, "
                            f"got {contact.sigma:g}, {contact.nu:g}, {contact.eta:g}")
    return contact.mirrored() if contact.eta < 0 else contact


def t_extremum(contact: ContactState, imp: SecondOrderParams, omega_a: float) -> Transition:
    """Classify the stationary point of the transition term.

    Offsets in the negative convention are mirrored first, so the result
    always refers to the positive-offset picture.
    """
    c = _normalised(contact)
    gap = imp.D * omega_a - imp.K
    if math.isclose(imp.D * omega_a, imp.K, rel_tol=1e-12, abs_tol=0.0):
        return Transition(TransitionClass.TRIVIAL, None)
    t_ex = 1.0 / omega_a + (imp.D * c.nu + imp.K * c.sigma) / (gap * c.eta)
    if gap > 0:
        return Transition(TransitionClass.LOCAL_MAXIMUM, t_ex)
    if t_ex < 0:
        return Transition(TransitionClass.NO_EXTREMUM, t_ex)
    return Transition(TransitionClass.LOCAL_MINIMUM_POSSIBLE, t_ex)


class SmoothCondition(str, Enum):
    SATISFIED = "satisfied"
    VIOLATED_LOW = "violated_low"
    VIOLATED_HIGH = "violated_high"


def check_smooth_condition(imp: SecondOrderParams, omega_a: float) -> SmoothCondition:
    """Test 2 zeta_i omega_a < omega_i <= 4 zeta_i omega_a.

    Multiplying through by sqrt(M_i K_i) turns this into
    D_i omega_a < K_i <= 2 D_i omega_a, which is evaluated directly so the
    boundaries are exact in (M, D, K).
    """
    if not omega_a > 0:
        raise AnalysisError("omega_a must be positive")
    lhs = imp.D * omega_a
    if imp.K <= lhs:
        return SmoothCondition.VIOLATED_LOW
    if imp.K > 2.0 * lhs:
        return SmoothCondition.VIOLATED_HIGH
    return SmoothCondition.SATISFIED


def design_omega_a_range(imp: SecondOrderParams) -> tuple[float, float]:
    """[omega_i / (4 zeta_i), omega_i / (2 zeta_i)), i.e. [K_i / 2D_i, K_i / D_i)."""
    return imp.K / (2.0 * imp.D), imp.K / imp.D


def initial_contact_force(kind: Union[ImpedanceLaw, str], contact: ContactState,
                          imp: SecondOrderParams, m: float, a_d0: float = 0.0,
                          omega_a: Optional[float] = None) -> float:
    kind = ImpedanceLaw(kind)
    if kind is ImpedanceLaw.NO_FEEDFORWARD:
        return imp.M * contact.a_c
    if kind is ImpedanceLaw.MI_EQUALS_M:
        return m * contact.a_c
    if omega_a is None:
        if contact.sigma == 0:
            raise AnalysisError("omega_a is needed for the full-feedforward law when sigma = 0")
        omega_a = (contact.eta - contact.nu) / contact.sigma
    return imp.M * (contact.a_c - a_d0) + imp.M * omega_a * (contact.eta + contact.nu)


# -- divided design ------------------------------------------------------------

def zoh_response(params: SecondOrderParams, force, dt: float) -> np.ndarray:
    """Response of M y'' + D y' + K y = f from rest to a sampled, held force.

    Sample k of the output is the state before the force sample k is
    applied. The discretisation is exact for piecewise-constant input.
    """
    force = np.asarray(force, dtype=float)
    A = np.array([[0.0, 1.0], [-params.K / params.M, -params.D / params.M]])
    aug = np.zeros((3, 3))
    aug[:2, :2] = A
    aug[1, 2] = 1.0 / params.M
    E = expm(aug * dt)
    Phi, Gam = E[:2, :2], E[:2, 2]
    z = np.zeros(2)
    out = np.empty(len(force))
    for k, f in enumerate(force):
        out[k] = z[0]
        z = Phi @ z + Gam * f
    return out


def _uniform_step(t: np.ndarray) -> float:
    if len(t) < 2:
        raise AnalysisError("trace needs at least two samples")
    steps = np.diff(t)
    dt = steps[0]
    if not dt > 0 or np.max(np.abs(steps - dt)) > 1e-9 * max(dt, abs(t[-1])):
        raise AnalysisError("trace time grid is not uniform")
    return float(dt)


def superposition_check(trace, adm: SecondOrderParams, imp: SecondOrderParams) -> float:
    """Largest deviation of x - x_d from the two independent force responses."""
    dt = _uniform_step(np.asarray(trace.t))
    n = len(trace.t)
    for name in ("x", "x_d", "f_p", "f_c"):
        if len(getattr(trace, name)) != n:
            raise AnalysisError(f"trace series {name} does not match the time grid")
    resp = zoh_response(adm, trace.fp_x, dt) + zoh_response(imp, trace.fc_x, dt)
    return float(np.max(np.abs(trace.x - trace.x_d - resp)))


# -- metrics -------------------------------------------------------------------

def reduction_effect(baseline_mean: float, case_mean: float) -> float:
    """100 * (baseline - case) / baseline, in percent."""
    if baseline_mean == 0:
        raise MetricError("baseline mean impact force is zero")
    return 100.0 * (baseline_mean - case_mean) / baseline_mean


@dataclass(frozen=True)
class ImpactMetrics:
    peaks: tuple
    mean: float
    sd: float
    baseline_mean: float
    reduction_effect: float


def peak_force(trace) -> float:
    if trace.contact_index is None:
        raise MetricError("trace has no contact event")
    return float(np.max(trace.f_c))


def impact_metrics(traces, baseline) -> ImpactMetrics:
    """Peak contact force per trial, its mean and population SD, and the
    reduction relative to the baseline trial(s)."""
    if not isinstance(traces, Sequence):
        traces = [traces]
    if not isinstance(baseline, Sequence):
        baseline = [baseline]
    if not traces or not baseline:
        raise MetricError("need at least one trace and one baseline trace")
    peaks = np.array([peak_force(tr) for tr in traces])
    base = float(np.mean([peak_force(tr) for tr in baseline]))
    mean = float(np.mean(peaks))
    return ImpactMetrics(tuple(float(p) for p in peaks), mean, float(np.std(peaks)), base,
                         reduction_effect(base, mean))


def contact_state_from_trace(trace, omega_a: float, stage: int = 0) -> ContactState:
    """Contact snapshot at the first sample in contact."""
    k = trace.contact_index
    if k is None:
        raise MetricError("trace has no contact event")
    sigma = float(trace.x_v[k, stage] - trace.x_d[k])
    nu = float(trace.v_v[k, stage] - trace.v_d[k])
    return ContactState.from_offsets(sigma, nu, omega_a, float(trace.x[k]), float(trace.v[k]),
                                     float(trace.a[k]))


@dataclass(frozen=True)
class _Gains:
    M: np.ndarray
    D: np.ndarray
    K: np.ndarray


@dataclass
class _Point:
    x: np.ndarray
    v: np.ndarray
    a: float = 0.0


def free_response(omega_a, sigma, nu, dt: float, n_steps: int, M: float = 1.0) -> np.ndarray:
    """Integrate force-free, critically damped admittance parts from (sigma, nu).

    All arguments broadcast, so many draws run at once through the same
    admittance law and RK4 step the simulator uses. Returns the offsets y
    with shape (n_steps + 1, n_draws).
    """
    omega_a, sigma, nu = np.broadcast_arrays(*(np.atleast_1d(np.asarray(v, dtype=float))
                                               for v in (omega_a, sigma, nu)))
    gains = _Gains(M * np.ones_like(omega_a), 2.0 * M * omega_a, M * omega_a ** 2)
    ref = _Point(0.0, 0.0)

    def deriv(t, z):
        return np.stack([z[1], admittance_accel(gains, _Point(z[0], z[1]), ref, 0.0)])

    z = np.stack([sigma, nu])
    out = np.empty((n_steps + 1, sigma.size))
    out[0] = z[0]
    for k in range(n_steps):
        z = rk4_step(deriv, k * dt, z, dt, k)
        out[k + 1] = z[0]
    return out
