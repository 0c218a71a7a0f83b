"""Obstacle kinematics, penalty contact and the reference trajectory.

Geometry is a single line. The plant's contact surface sits at ``x`` and
the obstacle's at ``x_obs``; the contact normal ``+1`` means the obstacle
lies on the negative side of the plant (it pushes the plant towards +x),
``-1`` the opposite. Gaps are measured along that normal so they are
positive when apart and negative under penetration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Mapping, Optional

from .controllers import DesiredState


@dataclass(frozen=True)
class ContactModel:
    k_c: float = 1e5
    c_c: float = 50.0

    def __post_init__(self):
        if not self.k_c > 0:
            raise ValueError("contact stiffness k_c must be > 0")
        if self.c_c < 0:
            raise ValueError("contact damping c_c must be >= 0")


def contact_force(gap: float, gap_rate: float, model: ContactModel) -> float:
    """Compression-only spring-damper; returns the repulsive magnitude (>= 0)."""
    if gap > 0:
        return 0.0
    return max(0.0, model.k_c * (-gap) + model.c_c * (-gap_rate))


class ObstacleLawKind(str, Enum):
    APPROACH = "approach"
    FIXED = "fixed"


@dataclass(frozen=True)
class ObstacleLaw:
    """Obstacle behaviour.

    ``approach``: driven at constant ``v0`` regardless of load until the first
    contact, then released as a free mass with Coulomb ``friction``.
    ``fixed``: never moves.
    """

    kind: ObstacleLawKind = ObstacleLawKind.APPROACH
    position: float = 0.05
    v0: float = -0.3
    mass: float = 0.5
    friction: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ObstacleLawKind(self.kind))
        if not self.mass > 0:
            raise ValueError("obstacle mass must be > 0")
        if not math.isfinite(self.v0):
            raise ValueError("obstacle v0 must be finite")
        if self.friction < 0:
            raise ValueError("friction must be >= 0")


@dataclass(frozen=True)
class ObstacleState:
    x: float
    v: float
    released: bool = False
    # cumulative friction impulse delivered to the obstacle (N s)
    friction_impulse: float = 0.0


def initial_obstacle_state(law: ObstacleLaw) -> ObstacleState:
    if law.kind is ObstacleLawKind.FIXED:
        return ObstacleState(law.position, 0.0)
    return ObstacleState(law.position, law.v0)


def release(state: ObstacleState) -> ObstacleState:
    return replace(state, released=True)


def obstacle_step(law: ObstacleLaw, force: float, state: ObstacleState,
                  dt: float) -> ObstacleState:
    """Advance the obstacle by ``dt`` under a load ``force`` held over the step.

    ``force`` is the contact force acting on the obstacle in the x frame.
    In the free phase the acceleration is piecewise constant, so the update
    is exact, including a stop when friction brings it to rest.
    """
    if law.kind is ObstacleLawKind.FIXED:
        return state
    if not state.released:
        return replace(state, x=state.x + law.v0 * dt, v=law.v0)

    m, fr, x, v = law.mass, law.friction, state.x, state.v
    t_left = dt
    j_fric = 0.0
    while t_left > 0:
        if v == 0.0:
            if abs(force) <= fr:
                j_fric -= force * t_left
                break
            f_fr = -math.copysign(fr, force)
        else:
            f_fr = -math.copysign(fr, v)
        a = (force + f_fr) / m
        v_new = v + a * t_left
        if f_fr != 0.0 and v != 0.0 and v_new * math.copysign(1.0, v) < 0.0:
            # stop inside the step; the next pass decides stick or slip
            t_stop = -v / a
            x += v * t_stop + 0.5 * a * t_stop * t_stop
            j_fric += f_fr * t_stop
            t_left -= t_stop
            v = 0.0
            continue
        x += v * t_left + 0.5 * a * t_left * t_left
        j_fric += f_fr * t_left
        v = v_new
        break
    return replace(state, x=x, v=v, friction_impulse=state.friction_impulse + j_fric)


# -- trajectory ----------------------------------------------------------------

@dataclass(frozen=True)
class MinJerkSpec:
    x0: float = 0.0
    xf: float = 0.0
    T: float = 1.0
    t0: float = 0.0

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("min-jerk duration T must be > 0")


def min_jerk(spec: MinJerkSpec, t: float) -> DesiredState:
    """Quintic 10-15-6 profile, held at the end points outside [t0, t0+T]."""
    dx = spec.xf - spec.x0
    tau = (t - spec.t0) / spec.T
    if tau <= 0.0:
        return DesiredState(spec.x0, 0.0, 0.0)
    if tau >= 1.0:
        return DesiredState(spec.xf, 0.0, 0.0)
    t2 = tau * tau
    t3 = t2 * tau
    s = t3 * (10.0 - 15.0 * tau + 6.0 * t2)
    ds = 30.0 * t2 * (1.0 - tau) ** 2
    dds = 60.0 * tau * (1.0 - tau) * (1.0 - 2.0 * tau)
    return DesiredState(spec.x0 + dx * s, dx * ds / spec.T, dx * dds / (spec.T * spec.T))


# -- scenarios -----------------------------------------------------------------

class ScenarioKind(str, Enum):
    """Contact situations: the obstacle approaches a holding plant in a/c,
    the plant runs into a fixed obstacle in b/d. a/b have the obstacle on
    the negative side of the plant, c/d on the positive side."""

    A = "a"
    B = "b"
    C = "c"
    D = "d"

    @property
    def obstacle_moves(self) -> bool:
        return self in (ScenarioKind.A, ScenarioKind.C)

    @property
    def normal(self) -> int:
        return 1 if self in (ScenarioKind.A, ScenarioKind.B) else -1


def build_scenario(kind: ScenarioKind | str, overrides: Optional[Mapping] = None):
    """Fully populated ScenarioConfig for one of the four situations.

    ``overrides`` maps dotted config keys (``"obstacle.v0"``) to values.
    Contradictory overrides raise ConfigError.
    """
    from .config import build_config

    return build_config(ScenarioKind(kind), overrides or {})
