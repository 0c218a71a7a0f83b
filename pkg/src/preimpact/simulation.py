"""Closed-loop simulation of plant, controller, sensor and obstacle.

Per integration step the sensor chain and the contact model are sampled
once at the start of the step and their forces are held over the step
(the measurement pipeline runs at the integration rate). The control law
and the virtual objects are evaluated continuously inside every RK4 stage.

Each run is a pure function of its ScenarioConfig.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from .config import ScenarioConfig
from .controllers import CONTACT, PROXIMITY, VirtualObjectState
from .dynamics import PlantState, detect_contact_onset, first_contact_index, integrate_step
from .environment import (ObstacleLawKind, contact_force, initial_obstacle_state, min_jerk,
                          obstacle_step, release)
from .sensing import ProximityChannel

ForceSignal = Callable[[float], float]


@dataclass
class SimTrace:
    """Uniform-grid record of a run.

    ``f_p`` is the virtual force as produced by the sensor chain and ``f_c``
    the contact force magnitude; both act on the plant along ``normal``.
    ``u`` and all positions are in the x frame.
    """

    t: np.ndarray
    x_d: np.ndarray
    v_d: np.ndarray
    a_d: np.ndarray
    x_v: np.ndarray  # (n, n_virtual)
    v_v: np.ndarray
    x: np.ndarray
    v: np.ndarray
    a: np.ndarray
    x_obs: np.ndarray
    v_obs: np.ndarray
    gap: np.ndarray
    xi: np.ndarray
    f_p: np.ndarray
    f_c: np.ndarray
    u: np.ndarray
    normal: int = 1
    a_v: Optional[np.ndarray] = None
    friction_impulse: Optional[np.ndarray] = None
    signal_lost: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.t)
        for name in ("x_d", "v_d", "a_d", "x", "v", "a", "x_obs", "v_obs", "gap", "xi",
                     "f_p", "f_c", "u"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"trace series {name} has length {len(getattr(self, name))}, "
                                 f"expected {n}")
        if self.x_v.shape[0] != n or self.v_v.shape != self.x_v.shape:
            raise ValueError("virtual-object series do not match the time grid")

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    @property
    def n_virtual(self) -> int:
        return self.x_v.shape[1]

    @property
    def contact_onset(self) -> Optional[float]:
        return detect_contact_onset(self.gap, self.t)

    @property
    def contact_index(self) -> Optional[int]:
        return first_contact_index(self.gap)

    @property
    def fp_x(self) -> np.ndarray:
        return self.normal * self.f_p

    @property
    def fc_x(self) -> np.ndarray:
        return self.normal * self.f_c

    def columns(self) -> list[str]:
        cols = ["t", "x_d", "v_d", "a_d"]
        for i in range(self.n_virtual):
            cols += [f"x_v{i + 1}", f"v_v{i + 1}"]
        return cols + ["x", "v", "a", "x_obs", "v_obs", "gap", "xi", "f_p", "f_c", "u"]

    def to_array(self) -> np.ndarray:
        parts = [self.t, self.x_d, self.v_d, self.a_d]
        for i in range(self.n_virtual):
            parts += [self.x_v[:, i], self.v_v[:, i]]
        parts += [self.x, self.v, self.a, self.x_obs, self.v_obs, self.gap, self.xi,
                  self.f_p, self.f_c, self.u]
        return np.column_stack(parts)

    def to_csv(self, path: Union[str, Path]):
        data = self.to_array()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns())
            for row in data:
                w.writerow(["%.17g" % v for v in row])

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "SimTrace":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [[float(v) for v in r] for r in reader if r]
        data = np.array(rows, dtype=float).reshape(-1, len(header))
        col = {name: data[:, i] for i, name in enumerate(header)}
        nv = sum(1 for h in header if h.startswith("x_v"))
        expected = ["t", "x_d", "v_d", "a_d"]
        for i in range(nv):
            expected += [f"x_v{i + 1}", f"v_v{i + 1}"]
        expected += ["x", "v", "a", "x_obs", "v_obs", "gap", "xi", "f_p", "f_c", "u"]
        if header != expected:
            raise ValueError(f"unexpected trace columns {header}")
        x_v = np.column_stack([col[f"x_v{i + 1}"] for i in range(nv)])
        v_v = np.column_stack([col[f"v_v{i + 1}"] for i in range(nv)])
        normal = 1 if col["x"][0] >= col["x_obs"][0] else -1
        return cls(col["t"], col["x_d"], col["v_d"], col["a_d"], x_v, v_v, col["x"], col["v"],
                   col["a"], col["x_obs"], col["v_obs"], col["gap"], col["xi"], col["f_p"],
                   col["f_c"], col["u"], normal=normal)


def simulate(cfg: ScenarioConfig, inject_fp: Optional[ForceSignal] = None,
             inject_fc: Optional[ForceSignal] = None,
             virtual_offsets: Optional[list[tuple[float, float]]] = None) -> SimTrace:
    """Run one scenario.

    ``inject_fp``/``inject_fc`` replace the sensor chain / contact model with
    prescribed x-frame force signals (open-loop tests); an injected contact
    force also switches the obstacle off. ``virtual_offsets`` gives initial
    (position, velocity) offsets of each virtual object from the desired
    state; by default they start on it.
    """
    ctrl = cfg.controller
    nv = ctrl.n_virtual
    m = cfg.plant_mass
    integ = cfg.integrator
    dt, n = integ.dt, integ.n_steps
    normal = cfg.normal
    traj = cfg.trajectory
    rng = np.random.default_rng(cfg.seed)
    channel = ProximityChannel(cfg.sensor, cfg.gain, cfg.filter, dt, rng)
    law = cfg.obstacle
    obs = initial_obstacle_state(law)
    hold_every = round(integ.control_period / dt) if integ.control_period > 0 else 0

    d0 = min_jerk(traj, 0.0)
    y = np.zeros(2 + 2 * nv)
    y[0], y[1] = d0.x, d0.v
    for i in range(nv):
        ox, ov = virtual_offsets[i] if virtual_offsets else (0.0, 0.0)
        y[2 + 2 * i] = d0.x + ox
        y[3 + 2 * i] = d0.v + ov

    N = n + 1
    rec = {k: np.empty(N) for k in ("t", "x_d", "v_d", "a_d", "x", "v", "a", "x_obs",
                                    "v_obs", "gap", "xi", "f_p", "f_c", "u", "j_fric")}
    xv = np.empty((N, nv))
    vv = np.empty((N, nv))
    av = np.empty((N, nv))

    forces = {PROXIMITY: 0.0, CONTACT: 0.0}
    held_u: list[Optional[float]] = [None]

    traj_cache: dict[float, object] = {}

    def evaluate(t, state):
        des = traj_cache.get(t)
        if des is None:
            if len(traj_cache) > 4:
                traj_cache.clear()
            des = traj_cache[t] = min_jerk(traj, t)
        plant = PlantState(state[0], state[1])
        virt = [VirtualObjectState(state[2 + 2 * i], state[3 + 2 * i]) for i in range(nv)]
        u, vos = ctrl.control(des, plant, virt, forces)
        if held_u[0] is not None:
            u = held_u[0]
        return des, u, vos

    def deriv(t, state):
        _, u, vos = evaluate(t, state)
        out = np.empty_like(state)
        out[0] = state[1]
        out[1] = (u + forces[CONTACT]) / m
        for i, vo in enumerate(vos):
            out[2 + 2 * i] = vo.v
            out[3 + 2 * i] = vo.a
        return out

    for k in range(N):
        t = k * dt
        gap = normal * (y[0] - obs.x)
        gap_rate = normal * (y[1] - obs.v)
        fc = contact_force(gap, gap_rate, cfg.contact)
        xi, fp = channel.sample(gap)
        if inject_fp is not None:
            fp = normal * inject_fp(t)
        if inject_fc is not None:
            fc = normal * inject_fc(t)
        forces[PROXIMITY] = normal * fp
        forces[CONTACT] = normal * fc

        if hold_every:
            if k % hold_every == 0:
                held_u[0] = None
                held_u[0] = evaluate(t, y)[1]
        des, u, vos = evaluate(t, y)

        rec["t"][k] = t
        rec["x_d"][k], rec["v_d"][k], rec["a_d"][k] = des.x, des.v, des.a
        rec["x"][k], rec["v"][k] = y[0], y[1]
        rec["a"][k] = (u + forces[CONTACT]) / m
        rec["x_obs"][k], rec["v_obs"][k] = obs.x, obs.v
        rec["gap"][k], rec["xi"][k] = gap, xi
        rec["f_p"][k], rec["f_c"][k], rec["u"][k] = fp, fc, u
        rec["j_fric"][k] = obs.friction_impulse
        for i, vo in enumerate(vos):
            xv[k, i], vv[k, i], av[k, i] = vo.x, vo.v, vo.a
        if k == n:
            break

        y = integrate_step(deriv, t, y, dt, integ.method, step=k)
        if inject_fc is None:
            if law.kind is ObstacleLawKind.APPROACH and not obs.released and gap <= 0:
                obs = release(obs)
            obs = obstacle_step(law, -normal * fc, obs, dt)

    return SimTrace(rec["t"], rec["x_d"], rec["v_d"], rec["a_d"], xv, vv, rec["x"], rec["v"],
                    rec["a"], rec["x_obs"], rec["v_obs"], rec["gap"], rec["xi"], rec["f_p"],
                    rec["f_c"], rec["u"], normal=normal, a_v=av,
                    friction_impulse=rec["j_fric"], signal_lost=channel.signal_lost)
