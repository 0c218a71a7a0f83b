"""Reflective proximity sensor model and the virtual viscous force.

The sensor output falls off as an inverse power of distance and scales
linearly with the target's reflectance. The virtual force uses the ratio
of the output rate to the output, so the reflectance cancels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import signal

logger = logging.getLogger(__name__)


class SensorSignalLost(ValueError):
    """Raised when the sensor output is not strictly positive."""


@dataclass(frozen=True)
class SensorParams:
    G_xi: float = 1.0
    alpha: float = 1.0
    psi: float = 1.0
    d_o: float = 5e-3
    n: float = 2.0
    residual_offset: float = 0.0
    # standard deviation of additive output noise; 0 keeps runs noiseless
    noise_std: float = 0.0

    def __post_init__(self):
        for name in ("G_xi", "psi", "d_o", "n"):
            if not getattr(self, name) > 0:
                raise ValueError(f"sensor {name} must be > 0")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"reflectance alpha must be in (0, 1], got {self.alpha}")
        if self.residual_offset < 0:
            raise ValueError("residual_offset must be >= 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


@dataclass(frozen=True)
class FilterConfig:
    order: int = 5
    cutoff_hz: float = 500.0
    sample_hz: Optional[float] = None
    enabled: bool = True

    def validated(self, default_sample_hz: float) -> "FilterConfig":
        """Return a copy with ``sample_hz`` filled in and the Nyquist limit checked."""
        fs = self.sample_hz if self.sample_hz is not None else default_sample_hz
        cfg = FilterConfig(self.order, self.cutoff_hz, fs, self.enabled)
        if cfg.enabled:
            if cfg.order < 1:
                raise ValueError("filter order must be >= 1")
            if not 0 < cfg.cutoff_hz < fs / 2:
                raise ValueError(
                    f"filter cutoff {cfg.cutoff_hz} Hz must lie in (0, {fs / 2}) Hz "
                    f"for sample rate {fs} Hz")
        return cfg


@dataclass(frozen=True)
class VirtualForceGain:
    G_p: float = 0.8
    saturation: Optional[float] = None

    def __post_init__(self):
        if self.G_p < 0:
            raise ValueError("G_p must be >= 0")
        if self.saturation is not None and not self.saturation > 0:
            raise ValueError("saturation must be > 0 when given")


def sensor_output(d, params: SensorParams):
    """Noiseless sensor output at gap distance ``d`` (scalar or array)."""
    if (d < 0) if isinstance(d, float) else np.any(np.asarray(d) < 0):
        raise ValueError("gap distance must be >= 0; clamp penetration before sensing")
    return (params.G_xi * params.alpha * params.psi / (d + params.d_o) ** params.n
            + params.residual_offset)


def virtual_viscous_force(xi: float, xi_dot: float, gain: VirtualForceGain) -> float:
    """f_p = G_p * xi_dot / xi, clipped to the optional saturation."""
    if not xi > 0:
        raise SensorSignalLost(f"sensor output {xi!r} is not positive")
    f = gain.G_p * xi_dot / xi
    if gain.saturation is not None:
        f = min(max(f, -gain.saturation), gain.saturation)
    return f


def virtual_force_closed_form(d, d_dot, gain: VirtualForceGain, n: float, d_o: float):
    if np.any(np.asarray(d) < 0):
        raise ValueError("gap distance must be >= 0")
    return -gain.G_p * n * d_dot / (d + d_o)


def xi_rate(prev_xi: Optional[float], xi: float, dt: float) -> float:
    """Backward difference; the first sample (``prev_xi`` None) has zero rate."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if prev_xi is None:
        return 0.0
    return (xi - prev_xi) / dt


def butterworth_sos(cfg: FilterConfig) -> np.ndarray:
    return signal.butter(cfg.order, cfg.cutoff_hz, btype="low", fs=cfg.sample_hz,
                         output="sos")


class LowPassFilter:
    """Discrete Butterworth low-pass run one sample at a time.

    Second-order sections in transposed direct form II. The state is
    primed on the first sample to the steady state for that input so a
    constant signal passes through without a start-up transient.
    """

    def __init__(self, cfg: FilterConfig):
        if cfg.sample_hz is None:
            raise ValueError("FilterConfig.sample_hz must be set; call validated() first")
        cfg = cfg.validated(cfg.sample_hz)
        self.cfg = cfg
        self.sos = butterworth_sos(cfg)
        self._sections = [tuple(float(c) for c in row) for row in self.sos]
        self._z = None

    def reset(self, x0: Optional[float] = None):
        if x0 is None:
            self._z = None
            return
        zi = signal.sosfilt_zi(self.sos) * x0
        self._z = [[float(a), float(b)] for a, b in zi]

    def step(self, x: float) -> float:
        if self._z is None:
            self.reset(x)
        y = x
        for (b0, b1, b2, _a0, a1, a2), z in zip(self._sections, self._z):
            out = b0 * y + z[0]
            z[0] = b1 * y - a1 * out + z[1]
            z[1] = b2 * y - a2 * out
            y = out
        return y


def filter_step(filt: LowPassFilter, raw: float) -> float:
    return filt.step(raw)


class ProximityChannel:
    """Sensor -> optional filter -> backward difference -> virtual force.

    One instance per run; ``sample`` must be called once per control sample.
    """

    def __init__(self, params: SensorParams, gain: VirtualForceGain,
                 filt: FilterConfig, dt: float, rng: Optional[np.random.Generator] = None):
        self.params = params
        self.gain = gain
        self.dt = dt
        self.filter = LowPassFilter(filt) if filt.enabled else None
        self.rng = rng
        self._prev: Optional[float] = None
        self.signal_lost = 0

    def sample(self, gap: float) -> tuple[float, float]:
        """Return (xi, f_p) for the current gap; penetration reads as d = 0."""
        xi = sensor_output(max(gap, 0.0), self.params)
        if self.params.noise_std > 0 and self.rng is not None:
            xi += self.params.noise_std * self.rng.standard_normal()
        if self.filter is not None:
            xi = self.filter.step(xi)
        rate = xi_rate(self._prev, xi, self.dt)
        self._prev = xi
        try:
            f_p = virtual_viscous_force(xi, rate, self.gain)
        except SensorSignalLost:
            self.signal_lost += 1
            if self.signal_lost == 1:
                logger.warning("proximity signal lost (xi=%g); f_p forced to 0", xi)
            f_p = 0.0
        return xi, f_p
