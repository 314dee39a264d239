import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tiltengine.hilbert import DensityOperator, HilbertLayout, expectation
from tiltengine.model import (
    Amplitude, ConfigError, InitialStateSpec, LindbladChannel, ParticleState, SpinParams, SpinState,
    SystemConfig, TimeControls, bare_spin_state, build_dissipator, build_hamiltonian, build_lattice_ops,
    initial_density, lindblad_rhs, spin_ops,
)

from conftest import random_density

REF_SPIN = SpinParams(1.0, 0.15, 0.07, 0.03)


def config(spins=(REF_SPIN,), n_sites=11, tilt=1.0, **kw):
    return SystemConfig(tilt, n_sites, tuple(spins), **kw)


def test_spin_params_derived_rates():
    assert math.isclose(REF_SPIN.lam, 0.05)
    assert math.isclose(REF_SPIN.p_up, 0.7)
    assert math.isclose(REF_SPIN.sz_bare, 0.4)
    assert SpinParams.from_mean_rate(1.0, 0.1, 0.01, 0.05).lambda_minus == pytest.approx(0.09)


@pytest.mark.parametrize("kw,key", [
    (dict(lambda_plus=-0.1), "lambda_plus"),
    (dict(lambda_minus=-1.0), "lambda_minus"),
    (dict(lambda_plus=0.0, lambda_minus=0.0), "lambda_plus"),
])
def test_spin_params_reject_bad_rates(kw, key):
    base = dict(omega=1.0, g=0.1, lambda_plus=0.07, lambda_minus=0.03)
    base.update(kw)
    with pytest.raises(ConfigError) as e:
        SpinParams(**base)
    assert e.value.key == key


@pytest.mark.parametrize("n_sites", [10, 9, 12.5])
def test_config_rejects_bad_lattices(n_sites):
    with pytest.raises(ConfigError) as e:
        config(n_sites=n_sites)
    assert e.value.key == "n_sites"


def test_time_controls_validation():
    with pytest.raises(ConfigError):
        TimeControls(t_final=1.0, dt=2.0)
    with pytest.raises(ConfigError):
        TimeControls(sample_stride=0)
    assert config().default_dt() == pytest.approx(2 * math.pi / 200)


def test_lattice_ops():
    ops = build_lattice_ops(HilbertLayout(3, 0))
    assert np.allclose(ops["X"].dense(), np.diag([-1, 0, 1]))
    d = ops["d"].dense()
    assert np.allclose(d @ d.conj().T, np.diag([1, 1, 0]))
    assert np.allclose(d.conj().T @ d, np.diag([0, 1, 1]))
    lay = HilbertLayout(15, 1)
    ops = build_lattice_ops(lay)
    d, x = ops["d"].dense(), ops["X"].dense()
    assert np.allclose(d @ x - x @ d, d)


def test_interaction_matrix_element():
    lay = HilbertLayout(11, 1)
    h = build_hamiltonian(config(), lay).dense()
    n = lay.site_index(0)
    up_n, down_n1 = 2 * n, 2 * (n + 1) + 1
    assert h[up_n, down_n1] == pytest.approx(0.15)
    assert np.allclose(h, h.conj().T)


def test_uncoupled_hamiltonian_is_diagonal():
    h = build_hamiltonian(config(spins=(SpinParams(1.0, 0.0, 0.07, 0.03),) * 2)).dense()
    assert np.count_nonzero(h - np.diag(np.diag(h))) == 0


def test_two_site_spectrum_by_hand():
    # basis |0 up>, |0 down>, |1 up>, |1 down>; only |0 up> <-> |1 down> couple
    w, g, tilt = 0.8, 0.3, 1.1
    lay = HilbertLayout(2, 1)
    h = build_hamiltonian(config(spins=(SpinParams(w, g, 0.07, 0.03),), tilt=tilt), lay).dense()
    block = np.array([[w / 2, g], [g, tilt - w / 2]])
    mean, half = np.trace(block) / 2, math.hypot((block[0, 0] - block[1, 1]) / 2, g)
    expected = sorted([-w / 2, tilt + w / 2, mean - half, mean + half])
    assert np.allclose(np.linalg.eigvalsh(h), expected)


def test_dissipator_channels():
    assert len(build_dissipator(config())) == 2
    cfg = config(spins=(SpinParams(1.0, 0.0, 0.0, 0.05),))
    ch = build_dissipator(cfg)
    assert [c.label for c in ch] == ["decay_1"]
    lay = cfg.layout
    rho = DensityOperator.product(lay, [np.diag(np.eye(11)[5]), np.diag([1.0, 0.0])])
    drho = lindblad_rhs(rho, build_hamiltonian(cfg), ch)
    down = 2 * 5 + 1
    assert drho[down, down].real == pytest.approx(0.05)
    with pytest.raises(ConfigError):
        LindbladChannel(-1.0, ch[0].jump)


def test_empty_generator_is_zero(rng):
    cfg = config(spins=())
    lay = cfg.layout
    h0 = build_hamiltonian(cfg) * 0.0
    rho = random_density(rng, lay.dim)
    assert np.allclose(lindblad_rhs(rho, h0, []), 0.0)


def test_bare_spin_relaxes_to_detailed_balance(rng):
    cfg = config(spins=(SpinParams(1.0, 0.0, 0.07, 0.03),))
    lay = cfg.layout
    p = np.abs(rng.normal(size=11))
    p /= p.sum()
    rho = DensityOperator.product(lay, [np.diag(p), bare_spin_state(cfg.spins[0])])
    out = lindblad_rhs(rho, build_hamiltonian(cfg), build_dissipator(cfg))
    assert np.max(np.abs(out)) < 1e-12


@given(st.integers(0, 2**32 - 1), st.integers(0, 2))
def test_rhs_preserves_trace_and_hermiticity(seed, n_spins):
    rng = np.random.default_rng(seed)
    spins = [SpinParams(rng.uniform(0.5, 2), rng.uniform(0, 0.3), rng.uniform(0, 0.1), rng.uniform(0.01, 0.1))
             for _ in range(n_spins)]
    cfg = config(spins=spins, tilt=rng.uniform(-2, 2))
    rho = random_density(rng, cfg.layout.dim)
    out = lindblad_rhs(rho, build_hamiltonian(cfg), build_dissipator(cfg))
    assert abs(np.trace(out)) < 1e-12
    assert np.max(np.abs(out - out.conj().T)) < 1e-12


@given(st.integers(0, 2**32 - 1))
def test_coherence_rotates_at_tilt_in_bulk(seed):
    """d<d>/dt = -i tilt <d> for states supported away from the walls."""
    rng = np.random.default_rng(seed)
    spins = (SpinParams(rng.uniform(0.5, 2), rng.uniform(0, 0.3), rng.uniform(0, 0.1), rng.uniform(0.01, 0.1)),)
    tilt = rng.uniform(-2, 2)
    cfg = config(spins=spins, tilt=tilt)
    lay = cfg.layout
    inner = np.zeros(lay.dim, bool)
    inner[2 * 2: 2 * 9] = True
    m = np.zeros((lay.dim, lay.dim), complex)
    m[np.ix_(inner, inner)] = random_density(rng, inner.sum())
    out = lindblad_rhs(m, build_hamiltonian(cfg), build_dissipator(cfg))
    d = build_lattice_ops(lay)["d"].dense()
    assert np.trace(d @ out) == pytest.approx(-1j * tilt * np.trace(d @ m), abs=1e-12)


def test_initial_states():
    two = config(initial=InitialStateSpec(ParticleState("two_site", phase=0.3)))
    rho = initial_density(two)
    lay = two.layout
    d = build_lattice_ops(lay)["d"]
    assert expectation(rho, d) == pytest.approx(0.5 * np.exp(-0.3j))
    assert expectation(rho, build_lattice_ops(lay)["X"]).real == pytest.approx(0.5)
    assert expectation(rho, spin_ops(lay, 1)["sz"]).real == pytest.approx(0.4)

    up = config(initial=InitialStateSpec(spins=(SpinState("up"),)))
    assert expectation(initial_density(up), spin_ops(up.layout, 1)["sz"]).real == pytest.approx(1.0)

    g = config(n_sites=31, initial=InitialStateSpec(ParticleState("gaussian", n0=2, width=1.5, phase_gradient=0.4)))
    x = build_lattice_ops(g.layout)["X"]
    assert expectation(initial_density(g), x).real == pytest.approx(2.0, abs=1e-9)


def test_entangled_override():
    spec = InitialStateSpec(entangled=(Amplitude(0, "u", 1.0), Amplitude(1, "d", 1j)))
    cfg = config(initial=spec)
    rho = initial_density(cfg)
    assert rho.trace() == pytest.approx(1.0)
    assert np.linalg.eigvalsh(rho.matrix)[-1] == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        initial_density(config(initial=InitialStateSpec(entangled=(Amplitude(0, "x", 1.0),))))
    with pytest.raises(ConfigError):
        config(initial=InitialStateSpec(spins=(SpinState("up"), SpinState("down"))))
