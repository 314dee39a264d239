import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import curve_fit

from tiltengine.analysis import (
    check_asymptotic_relation, detect_limit_cycle, extract_velocity, fit_entropy_log,
    fit_lorentzian_sum, lorentzian_sum, ols_line, side_peaks,
)
from tiltengine.diffusion import continuum_entropy
from tiltengine.experiments import limit_cycle_g_trend


def test_exact_linear_series():
    t = np.linspace(0, 100, 201)
    est = extract_velocity(t, 0.02 * t)
    assert est.velocity == pytest.approx(0.02, abs=1e-15)
    assert est.stderr < 1e-14
    assert est.window == (50.0, 100.0)


@given(st.floats(-5, 5), st.floats(0.1, 10.0))
def test_velocity_affine_properties(shift, scale):
    rng = np.random.default_rng(3)
    t = np.linspace(0, 60, 121)
    x = 0.01 * t + 0.05 * np.sin(t) + 1e-3 * rng.normal(size=t.size)
    base = extract_velocity(t, x, window=(20.0, 60.0))
    shifted = extract_velocity(t, x + shift, window=(20.0, 60.0))
    scaled = extract_velocity(t * scale, x, window=(20.0 * scale, 60.0 * scale))
    assert shifted.velocity == pytest.approx(base.velocity, rel=1e-8, abs=1e-12)
    assert scaled.velocity == pytest.approx(base.velocity / scale, rel=1e-8)


def test_window_floor_and_rejections():
    t = np.linspace(0, 200, 401)
    assert extract_velocity(t, t, tilt=0.5).window[0] == pytest.approx(40 * math.pi)
    with pytest.raises(ValueError):
        extract_velocity(t, t, window=(300.0, 400.0))
    with pytest.raises(ValueError):
        extract_velocity(t, t, window=(10.0, 5.0))


def test_ols_against_polyfit():
    rng = np.random.default_rng(0)
    x = np.linspace(0, 1, 50)
    y = 3 * x - 1 + 0.1 * rng.normal(size=50)
    slope, icpt, err, r2 = ols_line(x, y)
    (p1, p0), cov = np.polyfit(x, y, 1, cov="unscaled")
    assert slope == pytest.approx(p1) and icpt == pytest.approx(p0)
    resid = y - (p0 + p1 * x)
    assert err == pytest.approx(math.sqrt(cov[0, 0] * (resid @ resid) / 48))
    assert 0 < r2 < 1


def test_single_lorentzian_recovered():
    x = np.linspace(0.5, 1.5, 41)
    y = lorentzian_sum(x, [1.02], [0.07], [0.016])
    fit = fit_lorentzian_sum(x, y, 1)
    p = fit.peaks[0]
    assert fit.converged and not fit.degenerate
    assert p.center == pytest.approx(1.02, abs=1e-8)
    assert p.width == pytest.approx(0.07, rel=1e-8)
    assert p.amplitude == pytest.approx(0.016, rel=1e-8)


def test_three_peaks_recovered():
    x = np.linspace(0, 2.5, 81)
    truth = ([0.25, 1.0, 2.0], [0.06, 0.08, 0.05], [0.01, 0.02, 0.008])
    fit = fit_lorentzian_sum(x, lorentzian_sum(x, *truth), 3)
    for p, c, w, a in zip(fit.peaks, *truth):
        assert p.center == pytest.approx(c, abs=1e-6)
        assert p.width == pytest.approx(w, rel=1e-6)
        assert p.amplitude == pytest.approx(a, rel=1e-6)
    assert side_peaks(x, lorentzian_sum(x, *truth), fit) == []


def test_lm_agrees_with_scipy_on_noisy_data():
    rng = np.random.default_rng(5)
    x = np.linspace(0.5, 1.5, 41)
    y = lorentzian_sum(x, [1.0], [0.06], [0.015]) + 2e-4 * rng.normal(size=x.size)
    fit = fit_lorentzian_sum(x, y, 1)
    popt, _ = curve_fit(lambda x, c, w, a: a * w**2 / ((x - c) ** 2 + w**2), x, y, p0=[1.0, 0.05, 0.01])
    p = fit.peaks[0]
    assert p.center == pytest.approx(popt[0], abs=1e-7)
    assert p.width == pytest.approx(abs(popt[1]), rel=1e-5)
    assert p.amplitude == pytest.approx(popt[2], rel=1e-5)
    assert fit.residual_norm == pytest.approx(np.linalg.norm(y - fit.model(x)), rel=1e-10)


def test_constant_data_is_degenerate():
    x = np.linspace(0, 1, 21)
    fit = fit_lorentzian_sum(x, np.full(x.size, 0.3), 1)
    assert fit.degenerate
    assert fit.messages


def test_non_convergence_flagged():
    rng = np.random.default_rng(2)
    x = np.linspace(0, 2.5, 41)
    y = lorentzian_sum(x, [0.5, 1.5], [0.1, 0.1], [1.0, 0.8]) + 0.05 * rng.normal(size=x.size)
    fit = fit_lorentzian_sum(x, y, 2, max_iter=2)
    assert not fit.converged
    assert any("no convergence" in m for m in fit.messages)


def test_too_few_points_rejected():
    with pytest.raises(ValueError):
        fit_lorentzian_sum(np.arange(5.0), np.ones(5), 2)


def test_entropy_fit_synthetic():
    t = np.linspace(10, 1000, 200)
    fit = fit_entropy_log(t, 1 + 0.5 * np.log(t))
    assert fit.offset == pytest.approx(1.0, abs=1e-13)
    assert fit.residual < 1e-13
    assert fit.slope == pytest.approx(0.5, abs=1e-12)


def test_entropy_fit_continuum_law():
    t = np.geomspace(100, 10000, 300)
    fit = fit_entropy_log(t, continuum_entropy(0.003, t))
    assert fit.slope == pytest.approx(0.5, abs=1e-6)


def test_entropy_fit_rejects_bad_windows():
    with pytest.raises(ValueError):
        fit_entropy_log([0.0, -1.0, 1.0], [0.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        fit_entropy_log(np.linspace(1, 10, 10), np.zeros(10), window=(20.0, 30.0))


def synthetic_bloch(t, amp, tilt, sz=-0.2):
    return np.stack([amp * np.cos(tilt * t), amp * np.sin(tilt * t), np.full(t.size, sz)], axis=1)


def test_limit_cycle_on_synthetic_orbit():
    tilt = 1.1
    t = np.linspace(0, 300, 12001)
    rep = detect_limit_cycle(t, synthetic_bloch(t, 0.1, tilt), tilt)
    assert rep.has_cycle
    assert rep.period_error < 1e-4
    assert rep.amplitude[0] == pytest.approx(0.1, rel=1e-3)
    assert rep.max_deviation < 1e-4
    assert rep.sz_drift == 0.0


def test_no_cycle_without_oscillation():
    t = np.linspace(0, 300, 3001)
    rep = detect_limit_cycle(t, synthetic_bloch(t, 0.0, 1.0), 1.0)
    assert not rep.has_cycle
    with pytest.raises(ValueError):
        detect_limit_cycle(t[:20], synthetic_bloch(t[:20], 0.1, 1.0), 1.0)


def test_asymptotic_relation_closures():
    lp, lm = 0.07, 0.03
    bare = check_asymptotic_relation(0.0, (lp - lm) / (lp + lm), lp, lm)
    assert bare.best_c == 1.0 and bare.residual < 1e-15
    strong = check_asymptotic_relation(0.02, 0.0, lp, lm)
    assert strong.residual < 1e-15


def test_limit_cycle_amplitude_grows_with_small_g():
    amps = limit_cycle_g_trend((0.005, 0.01, 0.02))
    assert amps[0] < amps[1] < amps[2]
    assert amps[0] > 1e-3


def test_limit_cycle_amplitude_turns_over_above_optimum():
    # Above g = lam / sqrt(2) the amplitude |d0| g bias / (lam^2 + 2 g^2) falls with g.
    amps = limit_cycle_g_trend((0.05, 0.1, 0.15))
    assert amps[0] > amps[1] > amps[2]
    for g, a in zip((0.05, 0.1, 0.15), amps):
        assert a == pytest.approx(0.5 * g * 0.04 / (0.05**2 + 2 * g**2), rel=0.02)
