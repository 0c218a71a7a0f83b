import dataclasses
import math

import numpy as np
import pytest
from scipy import signal

from preimpact.analysis import ContactState, closed_form_y
from preimpact.controllers import (CONTACT, PACAC, PACIC, PROXIMITY, AdmittancePDTerminal,
                                   AdmittanceStage, ControllerConfigError, DesiredState,
                                   ImpedanceLaw, ImpedanceTerminal, SecondOrderParams,
                                   SerialChain, VirtualObjectState, admittance_accel,
                                   chain_from_pacac, chain_from_pacic, chain_step,
                                   impedance_input, pacac_step, pacic_step, pd_tracking_input)
from preimpact.dynamics import PlantState, integrate
from preimpact.environment import build_scenario
from preimpact.simulation import simulate

from conftest import run

ADM = SecondOrderParams.from_natural(1.0, 5.0, 1.0)
IMP = SecondOrderParams.from_natural(0.5, 15.0, 1.0)


def test_second_order_params():
    assert (ADM.K, ADM.D) == (25.0, 10.0)
    assert (IMP.K, IMP.D) == (112.5, 15.0)
    p = SecondOrderParams(2.0, 3.0, 7.0)
    q = SecondOrderParams.from_natural(2.0, p.omega, p.zeta)
    assert q.D == pytest.approx(3.0) and q.K == pytest.approx(7.0)
    for bad in [(0.0, 1.0, 1.0), (1.0, -1.0, 1.0), (1.0, 1.0, math.inf)]:
        with pytest.raises(ValueError):
            SecondOrderParams(*bad)


def test_default_gains_expand_from_config():
    cfg = build_scenario("c")
    assert cfg.controller.admittance == SecondOrderParams(1.0, 10.0, 25.0)
    assert cfg.controller.impedance == SecondOrderParams(0.5, 15.0, 112.5)
    assert cfg.gain.G_p == 0.8 and cfg.plant_mass == 0.5


def test_admittance_equilibrium():
    ref = DesiredState(0.3, -0.2, 1.7)
    assert admittance_accel(ADM, VirtualObjectState(0.3, -0.2), ref, 0.0) == 1.7


def test_admittance_constant_force_steady_state():
    f = 3.0
    ref = DesiredState(0.0, 0.0, 0.0)

    def deriv(t, z):
        return np.array([z[1], admittance_accel(ADM, VirtualObjectState(z[0], z[1]), ref, f)])

    ys = integrate(deriv, np.zeros(2), 1e-3, 10_000)
    assert abs(ys[-1][0] - f / ADM.K) < 1e-6 * f / ADM.K


def test_admittance_free_relaxation_after_contact_matches_closed_form():
    # filter off so the virtual force is exactly zero once in contact
    tr = run("c", filter__enabled=False, integrator__t_end=2.5, controller__kind="pacac",
             controller__kp=1e6, controller__kd=2 * math.sqrt(0.5e6))
    k = tr.contact_index + 1  # the onset sample still carries the last approach rate
    end = k + int(np.argmax(tr.gap[k:] > 0))
    assert end - k > 2000 and not tr.f_p[k:end].any()
    c = ContactState.from_offsets(tr.x_v[k, 0] - tr.x_d[k], tr.v_v[k, 0] - tr.v_d[k], ADM.omega)
    y, _, _ = closed_form_y(tr.t[k:end] - tr.t[k], c, ADM.omega)
    assert np.max(np.abs(tr.x_v[k:end, 0] - tr.x_d[k:end] - y)) < 1e-6


def test_impedance_examples():
    p = PlantState(0.1, 0.2)
    v = VirtualObjectState(0.1, 0.2, 4.0)
    assert impedance_input("mi_equals_m", IMP, 0.5, p, v, 9.0) == 0.0
    assert impedance_input("full_feedforward", IMP, 0.5, p, v, 0.0) == 0.5 * 4.0
    assert impedance_input("no_feedforward", IMP, 0.5, p, v, 0.0) == 0.0


def test_mi_equals_m_ignores_contact_force():
    p = PlantState(0.1, 0.0)
    v = VirtualObjectState(0.05, 0.3, 1.0)
    assert impedance_input("mi_equals_m", IMP, 0.7, p, v, 0.0) == \
        impedance_input("mi_equals_m", IMP, 0.7, p, v, 12.0)


def test_pd_examples():
    p = PlantState(0.2, 0.1)
    assert pd_tracking_input(1e4, 200.0, p, VirtualObjectState(0.2, 0.1, 0.0), 0.5) == 0.0
    assert pd_tracking_input(1e4, 200.0, p, VirtualObjectState(0.3, 0.1, 2.0), 0.5) \
        == pytest.approx(0.5 * 2.0 + 1e4 * 0.1)


def test_pd_step_offset_converges():
    kp, kd, m = 1e4, 2 * math.sqrt(0.5e4), 0.5
    target = VirtualObjectState(0.01, 0.0, 0.0)

    def deriv(t, z):
        u = pd_tracking_input(kp, kd, PlantState(z[0], z[1]), target, m)
        return np.array([z[1], u / m])

    ys = integrate(deriv, np.zeros(2), 1e-4, 5000)
    assert abs(ys[-1][0] - 0.01) < 1e-9


def test_pd_tracking_error_scales_inverse_gain():
    # a model mass mismatch gives a tracking error that the PD gain must absorb
    errs = []
    gains = (1e3, 1e4, 1e5)
    for kp in gains:
        tr = run("c", controller__kind="pacac", controller__kp=kp,
                 controller__kd=2 * math.sqrt(0.5 * kp), controller__model_mass=0.4)
        k = tr.contact_index
        errs.append(abs(tr.x_v[k, 1] - tr.x[k]))
    slope = np.polyfit(np.log10(gains), np.log10(errs), 1)[0]
    assert slope == pytest.approx(-1.0, abs=0.1)


def test_pd_gains_must_be_positive():
    with pytest.raises(ValueError):
        PACAC(ADM, IMP, 0.0, 1.0, 0.5)
    with pytest.raises(ValueError):
        AdmittancePDTerminal(IMP, 1.0, -1.0)


@pytest.mark.parametrize("law,expected", [("mi_equals_m", 0.0), ("no_feedforward", 0.0),
                                          ("full_feedforward", 0.5 * 2.5)])
def test_pacic_equilibrium(law, expected):
    d = DesiredState(0.1, 0.2, 2.5)
    ctrl = PACIC(ADM, IMP, 0.5, law)
    u, vo = pacic_step(ctrl, d, PlantState(0.1, 0.2), VirtualObjectState(0.1, 0.2), 0.0, 0.0)
    assert u == expected
    assert vo.a == 2.5


def test_pacac_equilibrium():
    d = DesiredState(0.1, 0.2, 2.5)
    ctrl = PACAC(ADM, IMP, 1e6, 2000.0, 0.5)
    vs = VirtualObjectState(0.1, 0.2)
    u, v1, v2 = pacac_step(ctrl, d, PlantState(0.1, 0.2), vs, vs, 0.0, 0.0)
    assert u == 0.5 * 2.5 and v1.a == v2.a == 2.5


def test_chain_equilibrium():
    chain = SerialChain((AdmittanceStage(ADM), AdmittanceStage(IMP, CONTACT)),
                        ImpedanceTerminal(IMP, "no_feedforward"), 0.5)
    d = DesiredState(0.0, 0.0, 0.0)
    vs = VirtualObjectState(0.0, 0.0)
    u, out = chain_step(chain, d, PlantState(0.0, 0.0), [vs, vs],
                        {PROXIMITY: 0.0, CONTACT: 0.0})
    assert u == 0.0 and all(o.a == 0.0 for o in out)


def test_chain_reductions_single_step():
    d = DesiredState(0.01, 0.1, -0.3)
    p = PlantState(0.02, 0.05)
    v1, v2 = VirtualObjectState(0.015, 0.12), VirtualObjectState(0.018, 0.08)
    forces = {PROXIMITY: 1.3, CONTACT: 4.2}
    for law in ImpedanceLaw:
        ctrl = PACIC(ADM, IMP, 0.5, law)
        u, vo = pacic_step(ctrl, d, p, v1, 1.3, 4.2)
        uc, out = chain_step(chain_from_pacic(ctrl), d, p, [v1], forces)
        assert (u, vo.a) == (uc, out[0].a)
    ctrl = PACAC(ADM, IMP, 1e5, 600.0, 0.5)
    u, a, b = pacac_step(ctrl, d, p, v1, v2, 1.3, 4.2)
    uc, out = chain_step(chain_from_pacac(ctrl), d, p, [v1, v2], forces)
    assert (u, a.a, b.a) == (uc, out[0].a, out[1].a)


def test_chain_config_errors():
    with pytest.raises(ControllerConfigError):
        SerialChain((), ImpedanceTerminal(IMP), 0.5)
    with pytest.raises(ControllerConfigError):
        SerialChain((AdmittanceStage(ADM, "thermal"),), ImpedanceTerminal(IMP), 0.5)
    with pytest.raises(ControllerConfigError):  # references a later stage
        SerialChain((AdmittanceStage(ADM, name="a", reference="b"),
                     AdmittanceStage(ADM, name="b")), ImpedanceTerminal(IMP), 0.5)
    with pytest.raises(ControllerConfigError):
        SerialChain((AdmittanceStage(ADM, name="a", reference="a"),), ImpedanceTerminal(IMP), 0.5)
    with pytest.raises(ControllerConfigError):
        SerialChain((AdmittanceStage(ADM, reference="nowhere"),), ImpedanceTerminal(IMP), 0.5)


def test_chain_shared_source_and_explicit_reference():
    # two stages fed by the same channel, both anchored to the desired state
    chain = SerialChain((AdmittanceStage(ADM, PROXIMITY, "p1"),
                         AdmittanceStage(IMP, PROXIMITY, "p2", reference="desired")),
                        ImpedanceTerminal(IMP), 0.5)
    d = DesiredState(0.0, 0.0, 0.0)
    vs = VirtualObjectState(0.0, 0.0)
    _, out = chain_step(chain, d, PlantState(0.0, 0.0), [vs, vs], {PROXIMITY: 2.0, CONTACT: 0.0})
    assert out[0].a == 2.0 / ADM.M and out[1].a == 2.0 / IMP.M


def test_closed_loop_impedance_matches_independent_integration():
    # with full feedforward the error x - x_v obeys M_i e'' + D_i e' + K_i e = f_c
    tr = run("c", controller__law="full_feedforward", controller__impedance__M=1.0)
    imp = SecondOrderParams.from_natural(1.0, 15.0, 1.0)
    A = np.array([[0.0, 1.0], [-imp.K / imp.M, -imp.D / imp.M]])
    sysd = signal.cont2discrete((A, np.array([[0.0], [1.0 / imp.M]]), np.eye(2),
                                 np.zeros((2, 1))), tr.dt, method="zoh")
    _, e, _ = signal.dlsim(sysd, tr.fc_x)
    assert tr.f_c.max() > 1.0
    assert np.max(np.abs(tr.x - tr.x_v[:, 0] - e[:, 0])) < 1e-6


@pytest.mark.parametrize("law,mass_key", [("no_feedforward", "M"), ("mi_equals_m", "m")])
def test_closed_loop_identities_hold_exactly(law, mass_key):
    tr = run("c", controller__law=law, controller__impedance__M=1.0)
    imp = SecondOrderParams.from_natural(1.0, 15.0, 1.0)
    mass = imp.M if mass_key == "M" else 0.5
    e = tr.x - tr.x_v[:, 0]
    ed = tr.v - tr.v_v[:, 0]
    lhs = mass * tr.a + imp.D * ed + imp.K * e
    assert np.max(np.abs(lhs - tr.fc_x)) < 1e-9 * max(1.0, tr.f_c.max())


def test_pacic_reduces_peak_force():
    assert run("c").f_c.max() < run("c", proximity__G_p=0.0).f_c.max()


def test_pacac_converges_to_pacic_with_gain():
    ref = run("c", controller__law="full_feedforward")
    devs = []
    for kp in (1e4, 1e5, 1e6):
        tr = run("c", controller__kind="pacac", controller__kp=kp,
                 controller__kd=2 * math.sqrt(0.5 * kp))
        devs.append(np.max(np.abs(tr.x - ref.x)))
    assert devs[0] > devs[1] > devs[2]
    assert devs[2] < 5e-6


def test_pacac_transition_term_is_monotone():
    # f_c minus the contact stage's response to the plant's own motion leaves
    # the term driven by the relaxing proximity stage
    tr = run("c", filter__enabled=False, integrator__t_end=2.5, controller__kind="pacac",
             controller__kp=1e6, controller__kd=2 * math.sqrt(0.5e6))
    k = tr.contact_index
    end = k + int(np.argmax(tr.gap[k:] > 0))
    P = IMP
    g = tr.fc_x - (P.M * (tr.a - tr.a_d) + P.D * (tr.v - tr.v_d) + P.K * (tr.x - tr.x_d))
    h = -(P.M * (tr.a_v[:, 0] - tr.a_d) + P.D * (tr.v_v[:, 0] - tr.v_d)
          + P.K * (tr.x_v[:, 0] - tr.x_d))
    settle = k + 200  # 20 ms for the stiff loop to absorb the impact
    assert np.max(np.abs(g[settle:end] - h[settle:end])) < 0.01 * abs(h[k])
    # x frame of scenario (c) is mirrored: the term decays from above towards zero
    assert h[k] > 0 and np.all(np.diff(h[k:end]) <= 0) and h[end - 1] > 0


def test_divided_design_admittance_unaffected_by_impedance_gains():
    a = run("c", controller__law="full_feedforward")
    b = run("c", controller__law="full_feedforward", controller__impedance__omega=25.0,
            controller__impedance__M=0.8)
    assert np.max(np.abs(a.x_v - b.x_v)) < 1e-9
    assert np.max(np.abs(a.x - b.x)) > 1e-6


def test_divided_design_contact_map_unaffected_by_admittance_gains():
    def trace(omega_a):
        cfg = build_scenario("a", {"controller.law": "full_feedforward",
                                   "controller.admittance.omega": omega_a,
                                   "filter.enabled": False, "integrator.t_end": 0.5})
        return simulate(cfg, inject_fp=lambda t: 1.5 * math.cos(9.0 * t),
                        inject_fc=lambda t: 3.0 * math.sin(30.0 * t))
    a, b = trace(5.0), trace(8.0)
    assert np.max(np.abs(a.x_v - b.x_v)) > 1e-4
    assert np.max(np.abs((a.x - a.x_v[:, 0]) - (b.x - b.x_v[:, 0]))) < 1e-9


def test_open_loop_superposition():
    from preimpact.analysis import zoh_response
    cfg = build_scenario("a", {"controller.law": "full_feedforward", "filter.enabled": False,
                               "integrator.t_end": 0.5})
    fp = lambda t: 1.5 * math.cos(9.0 * t)
    fc = lambda t: 3.0 * math.sin(30.0 * t)
    tr = simulate(cfg, inject_fp=fp, inject_fc=fc)
    only_p = simulate(cfg, inject_fp=fp, inject_fc=lambda t: 0.0)
    only_c = simulate(cfg, inject_fp=lambda t: 0.0, inject_fc=fc)
    both = (only_p.x - only_p.x_d) + (only_c.x - only_c.x_d)
    assert np.max(np.abs(tr.x - tr.x_d - both)) < 1e-8
    ref = zoh_response(cfg.admittance_params, tr.fp_x, tr.dt) \
        + zoh_response(cfg.contact_params, tr.fc_x, tr.dt)
    assert np.max(np.abs(tr.x - tr.x_d - ref)) < 1e-8


def _complex_gain(t, x, w, start):
    sel = t >= start
    basis = np.column_stack([np.sin(w * t[sel]), np.cos(w * t[sel]), np.ones(sel.sum())])
    (a, b, _), *_ = np.linalg.lstsq(basis, x[sel], rcond=None)
    return complex(a, b)  # response to sin(w t) is Im[G e^{iwt}] = Re G sin + Im G cos


def _tf(p, w, dt):
    """Sampled frequency response of 1/(M s^2 + D s + K) behind a zero-order hold."""
    A = np.array([[0.0, 1.0], [-p.K / p.M, -p.D / p.M]])
    Phi, Gam, C, _, _ = signal.cont2discrete((A, np.array([[0.0], [1.0 / p.M]]),
                                              np.array([[1.0, 0.0]]), np.zeros((1, 1))), dt,
                                             method="zoh")
    z = np.exp(1j * w * dt)
    return complex((C @ np.linalg.solve(z * np.eye(2) - Phi, Gam))[0, 0])


@pytest.mark.parametrize("w", [3.0, 10.0, 30.0])
def test_contact_driven_chain_compliances_add(w):
    # an admittance stage and an impedance terminal both fed by the contact
    # force: the plant sees the two second-order compliances in series
    base = build_scenario("a", {"filter.enabled": False, "integrator.dt": 1e-3,
                                "integrator.t_end": 5.0})
    chain = SerialChain((AdmittanceStage(ADM, CONTACT),),
                        ImpedanceTerminal(IMP, "full_feedforward"), base.plant_mass)
    cfg = dataclasses.replace(base, controller=chain)
    tr = simulate(cfg, inject_fp=lambda t: 0.0, inject_fc=lambda t: math.sin(w * t))
    g = _complex_gain(tr.t, tr.x - tr.x_d, w, 3.5)
    ga, gi = _tf(ADM, w, tr.dt), _tf(IMP, w, tr.dt)
    assert abs(g - (ga + gi)) < 1e-3 * abs(ga + gi)
    # the product of the two maps would be a different response altogether
    assert abs(g - ga * gi) > 0.1 * abs(ga + gi)
