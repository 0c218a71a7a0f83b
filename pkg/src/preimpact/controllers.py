"""Admittance/impedance control parts and their serial compositions.

A serial combined controller is a cascade: each admittance part simulates
a virtual object driven by one force channel and anchored to the state of
the part before it (the first part is anchored to the desired state). The
last virtual object is then realised on the plant either by an impedance
law (force-controlled robots) or by a second admittance part plus a PD
tracking loop (position/velocity-controlled robots).

Force channels are named: ``"proximity"`` carries the virtual viscous force
and ``"contact"`` the measured contact force, both expressed in the plant's
x frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional, Sequence, Union

PROXIMITY = "proximity"
CONTACT = "contact"
CHANNELS = (PROXIMITY, CONTACT)


class ControllerConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SecondOrderParams:
    """Desired inertia M, viscosity D and stiffness K."""

    M: float
    D: float
    K: float

    def __post_init__(self):
        for name in ("M", "D", "K"):
            val = getattr(self, name)
            if not (val > 0 and math.isfinite(val)):
                raise ValueError(f"{name} must be positive and finite, got {val}")

    @classmethod
    def from_natural(cls, M: float, omega: float, zeta: float) -> "SecondOrderParams":
        if not (omega > 0 and zeta > 0):
            raise ValueError("omega and zeta must be positive")
        return cls(M=M, D=2.0 * zeta * M * omega, K=M * omega * omega)

    @property
    def omega(self) -> float:
        return math.sqrt(self.K / self.M)

    @property
    def zeta(self) -> float:
        return self.D / (2.0 * math.sqrt(self.M * self.K))


@dataclass(slots=True)
class DesiredState:
    x: float
    v: float
    a: float


@dataclass(slots=True)
class VirtualObjectState:
    x: float
    v: float
    a: float = 0.0


class ImpedanceLaw(str, Enum):
    FULL_FEEDFORWARD = "full_feedforward"
    NO_FEEDFORWARD = "no_feedforward"
    MI_EQUALS_M = "mi_equals_m"


def admittance_accel(params: SecondOrderParams, stage, reference, f_in):
    """Virtual object acceleration of one admittance part.

    ``stage`` and ``reference`` only need ``x``/``v``/``a`` attributes, and
    numpy arrays work in place of floats.
    """
    return reference.a + (f_in - params.D * (stage.v - reference.v)
                          - params.K * (stage.x - reference.x)) / params.M


def impedance_input(kind: ImpedanceLaw, params: SecondOrderParams, m: float,
                    plant, virtual, f_c):
    kind = ImpedanceLaw(kind)
    if kind is ImpedanceLaw.MI_EQUALS_M:
        return -params.D * (plant.v - virtual.v) - params.K * (plant.x - virtual.x)
    ratio = m / params.M
    u = (ratio - 1.0) * f_c - ratio * (params.D * (plant.v - virtual.v)
                                       + params.K * (plant.x - virtual.x))
    if kind is ImpedanceLaw.FULL_FEEDFORWARD:
        u = u + m * virtual.a
    return u


def pd_tracking_input(kp: float, kd: float, plant, target, m: float):
    """Computed-torque PD: feedforward m*a_target plus PD on the tracking error."""
    return m * target.a + kd * (target.v - plant.v) + kp * (target.x - plant.x)


# -- serial compositions -----------------------------------------------------

@dataclass(frozen=True)
class AdmittanceStage:
    params: SecondOrderParams
    source: str = PROXIMITY
    name: Optional[str] = None
    # name of an earlier stage, "desired", or None for the previous stage
    reference: Optional[str] = None


@dataclass(frozen=True)
class ImpedanceTerminal:
    params: SecondOrderParams
    law: ImpedanceLaw = ImpedanceLaw.MI_EQUALS_M

    def __post_init__(self):
        object.__setattr__(self, "law", ImpedanceLaw(self.law))


@dataclass(frozen=True)
class AdmittancePDTerminal:
    params: SecondOrderParams
    kp: float
    kd: float
    source: str = CONTACT

    def __post_init__(self):
        if not (self.kp > 0 and self.kd > 0):
            raise ValueError("PD gains must be positive")


Terminal = Union[ImpedanceTerminal, AdmittancePDTerminal]


@dataclass(frozen=True)
class PACIC:
    """Proximity admittance part in series with a contact impedance part."""

    admittance: SecondOrderParams
    impedance: SecondOrderParams
    m: float
    law: ImpedanceLaw = ImpedanceLaw.MI_EQUALS_M

    def __post_init__(self):
        object.__setattr__(self, "law", ImpedanceLaw(self.law))
        if not self.m > 0:
            raise ValueError("plant mass must be positive")

    @property
    def n_virtual(self) -> int:
        return 1

    def control(self, desired, plant, virtual: Sequence, forces: Mapping[str, float]):
        u, vo = pacic_step(self, desired, plant, virtual[0],
                           forces[PROXIMITY], forces[CONTACT])
        return u, [vo]


@dataclass(frozen=True)
class PACAC:
    """Proximity admittance part, contact admittance part, PD tracking."""

    admittance1: SecondOrderParams
    admittance2: SecondOrderParams
    kp: float
    kd: float
    m: float

    def __post_init__(self):
        if not (self.kp > 0 and self.kd > 0):
            raise ValueError("PD gains must be positive")
        if not self.m > 0:
            raise ValueError("plant mass must be positive")

    @property
    def n_virtual(self) -> int:
        return 2

    def control(self, desired, plant, virtual: Sequence, forces: Mapping[str, float]):
        u, v1, v2 = pacac_step(self, desired, plant, virtual[0], virtual[1],
                               forces[PROXIMITY], forces[CONTACT])
        return u, [v1, v2]


def pacic_step(ctrl: PACIC, desired, plant, virtual, f_p, f_c):
    """One evaluation of the force-control-based controller.

    Returns the control force and the virtual object with its acceleration.
    """
    a_v = admittance_accel(ctrl.admittance, virtual, desired, f_p)
    vo = VirtualObjectState(virtual.x, virtual.v, a_v)
    u = impedance_input(ctrl.law, ctrl.impedance, ctrl.m, plant, vo, f_c)
    return u, vo


def pacac_step(ctrl: PACAC, desired, plant, virtual1, virtual2, f_p, f_c):
    a1 = admittance_accel(ctrl.admittance1, virtual1, desired, f_p)
    vo1 = VirtualObjectState(virtual1.x, virtual1.v, a1)
    a2 = admittance_accel(ctrl.admittance2, virtual2, vo1, f_c)
    vo2 = VirtualObjectState(virtual2.x, virtual2.v, a2)
    u = pd_tracking_input(ctrl.kp, ctrl.kd, plant, vo2, ctrl.m)
    return u, vo1, vo2


@dataclass(frozen=True)
class SerialChain:
    """Generalised cascade of N admittance stages and a terminal part."""

    stages: tuple
    terminal: Terminal
    m: float
    _refs: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise ControllerConfigError("a chain needs at least one admittance stage")
        if not self.m > 0:
            raise ValueError("plant mass must be positive")
        object.__setattr__(self, "_refs", _resolve_references(self.stages))
        sources = [s.source for s in self.stages]
        if isinstance(self.terminal, AdmittancePDTerminal):
            sources.append(self.terminal.source)
        for src in sources:
            if src not in CHANNELS:
                raise ControllerConfigError(
                    f"unknown force source {src!r}; expected one of {CHANNELS}")

    @property
    def n_virtual(self) -> int:
        extra = 1 if isinstance(self.terminal, AdmittancePDTerminal) else 0
        return len(self.stages) + extra

    def control(self, desired, plant, virtual: Sequence, forces: Mapping[str, float]):
        return chain_step(self, desired, plant, virtual, forces)


def _resolve_references(stages) -> tuple:
    """Index of each stage's reference (-1 for the desired state).

    A stage may only reference an earlier stage; anything else would close
    a loop through the cascade.
    """
    names = {}
    refs = []
    for k, st in enumerate(stages):
        if st.reference is None:
            refs.append(k - 1)
        elif st.reference == "desired":
            refs.append(-1)
        elif st.reference in names:
            refs.append(names[st.reference])
        elif st.reference == st.name or any(s.name == st.reference for s in stages[k:]):
            raise ControllerConfigError(
                f"stage {k} references {st.reference!r}, which is not upstream (cycle)")
        else:
            raise ControllerConfigError(f"stage {k} references unknown stage {st.reference!r}")
        if st.name is not None:
            if st.name in names or st.name == "desired":
                raise ControllerConfigError(f"duplicate stage name {st.name!r}")
            names[st.name] = k
    return tuple(refs)


def chain_step(chain: SerialChain, desired, plant, virtual: Sequence,
               forces: Mapping[str, float]):
    out = []
    for stage, ref_idx, vs in zip(chain.stages, chain._refs, virtual):
        ref = desired if ref_idx < 0 else out[ref_idx]
        a = admittance_accel(stage.params, vs, ref, forces[stage.source])
        out.append(VirtualObjectState(vs.x, vs.v, a))
    term = chain.terminal
    if isinstance(term, ImpedanceTerminal):
        u = impedance_input(term.law, term.params, chain.m, plant, out[-1], forces[CONTACT])
    else:
        vs = virtual[len(chain.stages)]
        a = admittance_accel(term.params, vs, out[-1], forces[term.source])
        target = VirtualObjectState(vs.x, vs.v, a)
        out.append(target)
        u = pd_tracking_input(term.kp, term.kd, plant, target, chain.m)
    return u, out


def chain_from_pacic(ctrl: PACIC) -> SerialChain:
    return SerialChain((AdmittanceStage(ctrl.admittance, PROXIMITY),),
                       ImpedanceTerminal(ctrl.impedance, ctrl.law), ctrl.m)


def chain_from_pacac(ctrl: PACAC) -> SerialChain:
    return SerialChain((AdmittanceStage(ctrl.admittance1, PROXIMITY),),
                       AdmittancePDTerminal(ctrl.admittance2, ctrl.kp, ctrl.kd, CONTACT),
                       ctrl.m)
