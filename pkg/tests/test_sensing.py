import math

import numpy as np
import pytest
from scipy import signal

from preimpact.sensing import (FilterConfig, LowPassFilter, ProximityChannel, SensorParams,
                               SensorSignalLost, VirtualForceGain, butterworth_sos, filter_step,
                               sensor_output, virtual_force_closed_form, virtual_viscous_force,
                               xi_rate)

from conftest import run

UNIT = SensorParams(G_xi=1.0, alpha=1.0, psi=1.0, d_o=1.0, n=2.0)


def test_sensor_output_examples():
    assert sensor_output(0.0, UNIT) == 1.0
    assert sensor_output(1.0, UNIT) == 0.25


def test_sensor_output_linear_in_reflectance():
    d = np.linspace(0.0, 0.2, 50)
    full = SensorParams(alpha=1.0)
    half = SensorParams(alpha=0.5)
    assert np.array_equal(sensor_output(d, half), 0.5 * sensor_output(d, full))


def test_sensor_output_strictly_decreasing():
    d = np.linspace(0.0, 0.5, 500)
    assert np.all(np.diff(sensor_output(d, SensorParams())) < 0)


def test_sensor_output_rejects_penetration():
    with pytest.raises(ValueError):
        sensor_output(-1e-6, SensorParams())


@pytest.mark.parametrize("kwargs", [dict(alpha=0.0), dict(alpha=1.5), dict(d_o=0.0), dict(n=-1.0),
                                    dict(G_xi=0.0), dict(residual_offset=-1.0)])
def test_sensor_params_validation(kwargs):
    with pytest.raises(ValueError):
        SensorParams(**kwargs)


def test_virtual_force_examples():
    g = VirtualForceGain(0.8)
    assert virtual_viscous_force(3.0, 0.0, g) == 0.0
    assert virtual_viscous_force(2.0, -5.0, g) == virtual_viscous_force(4.0, -10.0, g)


def test_virtual_force_signal_lost():
    with pytest.raises(SensorSignalLost):
        virtual_viscous_force(0.0, 1.0, VirtualForceGain(0.8))


def test_virtual_force_saturation():
    g = VirtualForceGain(0.8, saturation=1.5)
    assert virtual_viscous_force(1.0, 100.0, g) == 1.5
    assert virtual_viscous_force(1.0, -100.0, g) == -1.5


def test_virtual_force_matches_closed_form_on_grid():
    params = SensorParams(G_xi=2.0, alpha=0.7, psi=3.0, d_o=5e-3, n=2.0)
    gain = VirtualForceGain(0.8)
    d, dd = np.meshgrid(np.linspace(0.0, 0.2, 41), np.linspace(-1.0, 1.0, 41))
    xi = sensor_output(d, params)
    # chain rule on the sensor law
    xi_dot = -params.n * params.G_xi * params.alpha * params.psi * dd \
        / (d + params.d_o) ** (params.n + 1)
    via_sensor = gain.G_p * xi_dot / xi
    closed = virtual_force_closed_form(d, dd, gain, params.n, params.d_o)
    assert np.max(np.abs(via_sensor - closed)) < 1e-12


def test_closed_form_limits():
    g = VirtualForceGain(0.8)
    assert virtual_force_closed_form(0.0, 0.0, g, 2.0, 5e-3) == 0.0
    assert virtual_force_closed_form(0.1, 0.0, g, 2.0, 5e-3) == 0.0
    assert abs(virtual_force_closed_form(1e9, -1.0, g, 2.0, 5e-3)) < 1e-8
    # approaching (d shrinking) pushes away
    assert virtual_force_closed_form(0.02, -0.3, g, 2.0, 5e-3) > 0


def test_xi_rate_examples():
    assert xi_rate(None, 4.0, 1e-4) == 0.0
    assert xi_rate(2.0, 2.0, 1e-4) == 0.0
    assert xi_rate(1.0, 1.5, 0.25) == 2.0
    dt = 1e-4
    t = 0.3
    est = xi_rate(math.exp(-(t - dt)), math.exp(-t), dt)
    assert abs(est + math.exp(-t)) / math.exp(-t) < 1e-3


def bilinear_butterworth(order, fc, fs):
    """Digital Butterworth poles, zeros and gain from the analogue prototype."""
    wc = 2.0 * fs * math.tan(math.pi * fc / fs)
    k = np.arange(order)
    poles_s = wc * np.exp(1j * math.pi * (2 * k + order + 1) / (2 * order))
    poles_z = (1 + poles_s / (2 * fs)) / (1 - poles_s / (2 * fs))
    zeros_z = -np.ones(order)
    gain = np.real(np.prod(1 - poles_z) / np.prod(1 - zeros_z))
    return zeros_z, poles_z, gain


def test_butterworth_matches_bilinear_oracle():
    cfg = FilterConfig(5, 500.0, 10_000.0)
    sos = butterworth_sos(cfg)
    z, p, k = bilinear_butterworth(5, 500.0, 10_000.0)
    w = np.linspace(0, math.pi, 400)
    _, h_lib = signal.sosfreqz(sos, worN=w)
    e = np.exp(1j * w)
    h_ref = k * np.prod([e - zi for zi in z], axis=0) / np.prod([e - pi for pi in p], axis=0)
    assert np.max(np.abs(h_lib - h_ref)) < 1e-10
    lib_poles = np.concatenate([np.roots(s[3:]) for s in sos])
    # odd orders carry a padded first-order section with a pole at the origin
    lib_poles = lib_poles[np.abs(lib_poles) > 1e-12]
    assert np.allclose(np.sort_complex(lib_poles), np.sort_complex(p), atol=1e-10)


def _filtered(x, cfg):
    filt = LowPassFilter(cfg)
    return np.array([filter_step(filt, v) for v in x])


def test_filter_dc_gain():
    cfg = FilterConfig(5, 500.0, 10_000.0)
    n = int(10 / 500.0 * 10_000) + 200
    filt = LowPassFilter(cfg)
    filt.reset(0.0)
    out = [filt.step(2.5) for _ in range(n)]
    assert abs(out[-1] - 2.5) < 1e-9


def test_filter_primed_on_first_sample():
    out = _filtered(np.full(50, 7.0), FilterConfig(5, 500.0, 10_000.0))
    assert np.allclose(out, 7.0, rtol=0, atol=1e-12)


def test_filter_minus_3db_at_cutoff():
    fs, fc = 10_000.0, 500.0
    t = np.arange(int(0.2 * fs)) / fs
    x = np.sin(2 * math.pi * fc * t)
    filt = LowPassFilter(FilterConfig(5, fc, fs))
    filt.reset(0.0)
    y = np.array([filt.step(v) for v in x])
    tail = y[len(y) // 2:]
    amp = math.sqrt(2.0 * np.mean(tail ** 2))
    assert amp == pytest.approx(1 / math.sqrt(2), rel=0.01)


def test_filter_matches_scipy_sosfilt():
    cfg = FilterConfig(5, 500.0, 10_000.0)
    x = np.random.default_rng(3).standard_normal(500)
    filt = LowPassFilter(cfg)
    filt.reset(0.0)
    ours = np.array([filt.step(v) for v in x])
    assert np.allclose(ours, signal.sosfilt(butterworth_sos(cfg), x), atol=1e-12)


@pytest.mark.parametrize("cutoff", [5_000.0, 6_000.0, 0.0])
def test_filter_rejects_cutoff_beyond_nyquist(cutoff):
    with pytest.raises(ValueError):
        FilterConfig(5, cutoff).validated(10_000.0)


def test_channel_zero_in_contact():
    ch = ProximityChannel(SensorParams(), VirtualForceGain(0.8), FilterConfig(enabled=False), 1e-4)
    ch.sample(0.0)
    for gap in (0.0, -1e-4, -2e-4):
        assert ch.sample(gap)[1] == 0.0


def test_channel_signal_lost_is_counted():
    # a noisy, extremely weak signal can dip below zero
    params = SensorParams(G_xi=1e-12, noise_std=1.0)
    ch = ProximityChannel(params, VirtualForceGain(0.8), FilterConfig(enabled=False), 1e-4,
                          np.random.default_rng(0))
    forces = [ch.sample(0.05)[1] for _ in range(20)]
    assert ch.signal_lost > 0
    assert all(math.isfinite(f) for f in forces)


def test_reflectance_invariance_of_force_series():
    ref = run("c", integrator__t_end=0.9)
    for alpha in (0.3, 0.54, 0.765):
        tr = run("c", integrator__t_end=0.9, sensor__alpha=alpha)
        assert np.max(np.abs(tr.f_p - ref.f_p)) < 1e-9 * np.max(np.abs(ref.f_p))


def test_residual_offset_attenuates_virtual_force():
    ch0 = ProximityChannel(SensorParams(), VirtualForceGain(0.8), FilterConfig(enabled=False), 1e-4)
    ch1 = ProximityChannel(SensorParams(residual_offset=200.0), VirtualForceGain(0.8),
                           FilterConfig(enabled=False), 1e-4)
    gaps = np.linspace(0.05, 0.0, 200)
    f0 = np.array([ch0.sample(g)[1] for g in gaps])[1:]
    f1 = np.array([ch1.sample(g)[1] for g in gaps])[1:]
    assert np.all(f0 > 0)
    assert np.all(np.abs(f1) < np.abs(f0))
