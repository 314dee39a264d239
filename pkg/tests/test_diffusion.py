import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tiltengine.diffusion import (
    HopRates, SiteDistribution, StabilityError, continuum_entropy, diffusion_evolve,
    diffusion_step, hop_rates, step_kernel,
)
from tiltengine.model import SpinParams, SystemConfig


def config(g=0.01, lp=0.07, lm=0.03, tilt=1.0, spins=None):
    spins = spins or (SpinParams(1.0, g, lp, lm),)
    return SystemConfig(tilt, 41, spins)


def test_hop_rates_example():
    r = hop_rates(config())
    assert r.drift == pytest.approx(1.6e-3, rel=1e-12)
    assert 2 * r.diffusion == pytest.approx(4e-3, rel=1e-12)


def test_hop_rate_limits():
    r = hop_rates(config(lp=0.05, lm=0.05))
    assert r.drift == 0.0 and r.diffusion > 0
    far = hop_rates(config(tilt=1e6))
    assert far.total_up < 1e-15 and far.total_down < 1e-15


def test_rates_add_over_spins():
    a, b = SpinParams(1.0, 0.01, 0.07, 0.03), SpinParams(0.6, 0.02, 0.02, 0.06)
    both = hop_rates(config(spins=(a, b)))
    ra, rb = hop_rates(config(spins=(a,))), hop_rates(config(spins=(b,)))
    assert both.drift == pytest.approx(ra.drift + rb.drift, rel=1e-14)
    assert both.diffusion == pytest.approx(ra.diffusion + rb.diffusion, rel=1e-14)


def test_single_euler_step_from_delta():
    rates = HopRates(np.array([0.3]), np.array([0.1]))
    dt = 0.2
    out = diffusion_step(SiteDistribution.delta(0), rates, dt)
    p = dict(zip(out.labels, out.p))
    assert p[1] == pytest.approx(dt * 0.3)
    assert p[-1] == pytest.approx(dt * 0.1)
    assert p[0] == pytest.approx(1 - dt * 0.4)


def test_stability_bound_rejected():
    rates = HopRates(np.array([0.3]), np.array([0.2]))
    with pytest.raises(StabilityError):
        diffusion_step(SiteDistribution.delta(0), rates, 1.0)


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.integers(1, 60))
def test_euler_moment_recursions(u, d, n):
    rates = HopRates(np.array([u]), np.array([d]))
    dt = 0.4 / max(u + d, 1e-9)
    dist = SiteDistribution.delta(0, pad=1)
    mean, var = 0.0, 0.0
    for k in range(n):
        dist = diffusion_step(dist, rates, dt)
        mean += (u - d) * dt
        var += (u + d) * dt - ((u - d) * dt) ** 2
        assert abs(dist.p.sum() - 1) < 1e-14 * (1 + k)
        assert dist.p.min() >= 0
    assert dist.mean() == pytest.approx(mean, rel=1e-12, abs=1e-12)
    assert dist.var() == pytest.approx(var, rel=1e-11, abs=1e-12)


def test_array_grows_when_edges_fill():
    rates = HopRates(np.array([0.5]), np.array([0.5]))
    dist = SiteDistribution.delta(0, pad=1)
    for _ in range(50):
        dist = diffusion_step(dist, rates, 0.4)
    assert dist.p.size > 3
    assert dist.p.sum() == pytest.approx(1.0, abs=1e-13)
    assert dist.var() == pytest.approx(50 * 0.4, rel=1e-12)


@pytest.mark.parametrize("u,d", [(0.3, 0.1), (0.0, 0.2), (0.2, 0.0), (0.4, 0.4)])
def test_kernel_moments(u, d):
    w, shift = step_kernel(HopRates(np.array([u]), np.array([d])), 5.0)
    m = shift + np.arange(w.size)
    assert w.sum() == pytest.approx(1.0, abs=1e-13)
    assert w @ m == pytest.approx((u - d) * 5.0, abs=1e-12)
    mean = w @ m
    assert w @ (m - mean) ** 2 == pytest.approx((u + d) * 5.0, abs=1e-11)


def test_evolve_moments_match_drift_and_variance():
    cfg = config()
    r = hop_rates(cfg)
    tr = diffusion_evolve(cfg, 2000.0)
    assert tr.mean[-1] == pytest.approx(r.drift * 2000.0, rel=1e-12)
    assert tr.var[-1] == pytest.approx(2 * r.diffusion * 2000.0, rel=1e-12)
    eul = diffusion_evolve(cfg, 2000.0, scheme="euler", sample_every=100)
    assert eul.mean[-1] == pytest.approx(r.drift * 2000.0, rel=1e-10)
    assert eul.var[-1] == pytest.approx(2 * r.diffusion * 2000.0, rel=0.05)


def test_unbiased_walk_stays_centred():
    tr = diffusion_evolve(config(lp=0.05, lm=0.05), 1000.0)
    assert abs(tr.mean[-1]) < 1e-12
    assert np.allclose(tr.var, 2 * hop_rates(config(lp=0.05, lm=0.05)).diffusion * tr.t, rtol=1e-10, atol=1e-14)


def test_continuum_entropy_reference_value():
    assert continuum_entropy(1.0, 1 / (4 * math.pi)) == pytest.approx(0.5)


@pytest.mark.parametrize("dt_product,tol", [(1.0, 0.10), (10.0, 0.01), (100.0, 0.003)])
def test_discrete_entropy_approaches_continuum(dt_product, tol):
    cfg = config(g=0.1)
    D = hop_rates(cfg).diffusion
    tr = diffusion_evolve(cfg, dt_product / D)
    sc = continuum_entropy(D, tr.t[-1])
    assert abs(tr.entropy[-1] - sc) / sc < tol


def test_snapshots_and_csv(tmp_path):
    tr = diffusion_evolve(config(g=0.1), 100.0, keep=(50.0,))
    assert 50.0 in tr.snapshots
    assert tr.snapshots[50.0].p.sum() == pytest.approx(1.0)
    lines = tr.to_csv(tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "t,mean_x,var_x,entropy"
    assert len(lines) == tr.t.size + 1
