import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tiltengine.meanfield import (
    MeanFieldState, total_rate_matrix, closed_form_sigma_plus, drive_matrix, energy_accounting,
    integrate_lab, integrate_rotating, meanfield_rhs, steady_state_spin, velocity_separable,
)
from tiltengine.model import SpinParams, SystemConfig

REF_SPIN = SpinParams(1.0, 0.15, 0.07, 0.03)

rates = st.floats(0.001, 0.2)
spins = st.builds(SpinParams, st.floats(0.1, 3.0), st.floats(0.0, 0.5), rates, rates)


def config(spin=REF_SPIN, tilt=1.0):
    return SystemConfig(tilt, 41, (spin,))


def test_drive_matrix_is_conjugate_of_total_rate_layout():
    for tilt in (0.7, 1.0, 1.4):
        m = drive_matrix(REF_SPIN, tilt, 0.5).m
        assert np.allclose(m, np.conj(total_rate_matrix(REF_SPIN, tilt, 0.5)), atol=1e-15)


@given(spins, st.floats(0.0, 3.0), st.floats(0.0, 0.5))
def test_drive_matrix_is_stable(spin, tilt, d0):
    ev = np.linalg.eigvals(drive_matrix(spin, tilt, d0).m)
    assert np.all(ev.real < 0)


@given(spins, st.floats(0.0, 3.0), st.floats(0.0, 0.5))
def test_steady_state_matches_closed_form(spin, tilt, d0):
    ss = steady_state_spin(spin, tilt, d0)
    assert abs(ss.s_plus[0] - closed_form_sigma_plus(spin, tilt, d0)) < 1e-12
    assert abs(ss.s_z[0]) <= 1 + 1e-12
    assert ss.bloch_excess()[0] <= 1e-12


def test_rhs_is_affine_with_matrix_m():
    rng = np.random.default_rng(1)
    dm = drive_matrix(REF_SPIN, 0.9, 0.5)
    base = MeanFieldState([0.0], [0.0], 0.5)
    f0 = meanfield_rhs(base, (REF_SPIN,), 0.9)
    for _ in range(5):
        sm, sz = complex(*rng.normal(size=2)) * 0.2, rng.normal() * 0.3
        f = meanfield_rhs(MeanFieldState([sm], [sz], 0.5), (REF_SPIN,), 0.9)
        lin = dm.m @ np.array([sm, np.conj(sm), sz])
        assert abs((f.s_minus[0] - f0.s_minus[0]) - lin[0]) < 1e-14
        assert abs((f.s_z[0] - f0.s_z[0]) - lin[2].real) < 1e-14


def test_uncoupled_rotating_frame_decay():
    t = 30.0
    x0 = np.array([0.3 + 0.1j, 0.3 - 0.1j, 0.9])
    x = integrate_rotating(REF_SPIN, 0.8, 0.0, t, dt=0.01, x0=x0)
    sm = x0[0] * np.exp((-REF_SPIN.lam - 1j * (REF_SPIN.omega - 0.8)) * t)
    sz = REF_SPIN.sz_bare + (0.9 - REF_SPIN.sz_bare) * math.exp(-2 * REF_SPIN.lam * t)
    assert abs(x[0] - sm) < 1e-10
    assert abs(x[2] - sz) < 1e-10


def test_decoupled_and_balanced_limits():
    ss = steady_state_spin(REF_SPIN, 1.0, 0.0)
    assert ss.s_minus[0] == 0
    assert ss.s_z[0] == pytest.approx(REF_SPIN.bias / (2 * REF_SPIN.lam))
    balanced = SpinParams(1.0, 0.15, 0.05, 0.05)
    ss = steady_state_spin(balanced, 1.0, 0.5)
    assert abs(ss.s_plus[0]) < 1e-15 and abs(ss.s_z[0]) < 1e-15


def test_steady_state_matches_long_integration():
    ss = steady_state_spin(REF_SPIN, 1.0, 0.5)
    x = integrate_rotating(REF_SPIN, 1.0, 0.5, 600.0, dt=0.05)
    assert abs(x[0] - ss.s_minus[0]) < 1e-8
    assert abs(x[2] - ss.s_z[0]) < 1e-8


def test_separable_velocity_values():
    v = velocity_separable(config(), 0.5)
    assert v.closed_form == pytest.approx(0.25 * 0.0225 * 0.04 / (2 * 0.25 * 0.0225 + 0.0025))
    assert v.value == pytest.approx(0.016364, abs=1e-6)
    assert v.discrepancy < 1e-12
    assert velocity_separable(config(), 0.0).value == 0.0
    assert velocity_separable(config(SpinParams(1.0, 0.15, 0.05, 0.05)), 0.5).value == 0.0


def test_separable_velocity_resonance_and_sign():
    tilts = np.linspace(0.5, 1.5, 101)
    v = np.array([velocity_separable(config(tilt=t), 0.5).value for t in tilts])
    assert tilts[np.argmax(np.abs(v))] == pytest.approx(1.0)
    for lp, lm in ((0.09, 0.01), (0.01, 0.09)):
        val = velocity_separable(config(SpinParams(1.0, 0.15, lp, lm), tilt=1.1), 0.5).value
        assert np.sign(val) == np.sign(lp - lm)


def test_lab_trajectory_stays_in_bloch_ball():
    traj = integrate_lab(config(), 0.5, 200.0, sm0=[0.45], sz0=[-0.2])
    assert np.all(traj.s_z**2 + 4 * np.abs(traj.s_minus) ** 2 <= 1 + 1e-8)


def test_lab_frame_velocity_converges_to_separable():
    cfg = config()
    traj = integrate_lab(cfg, 0.5, 600.0)
    v = traj.velocity(cfg.spins)
    assert v[-1] == pytest.approx(velocity_separable(cfg, 0.5).value, abs=1e-8)


def test_energy_balance_on_limit_cycle():
    cfg = config()
    e = energy_accounting(cfg, 0.5)
    assert e.balance_error < 1e-6
    assert abs(-e.work - e.work_from_velocity) / abs(e.work_from_velocity) < 1e-6
    assert e.closure < 1e-6


def test_energy_trivial_cases():
    e = energy_accounting(config(SpinParams(1.0, 0.15, 0.05, 0.05)), 0.5, t0_periods=10)
    assert abs(e.heat) < 1e-8 and abs(e.work) < 1e-8
    e = energy_accounting(config(), 0.0, t0_periods=10)
    assert e.work == 0.0
