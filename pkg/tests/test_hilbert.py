import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tiltengine.hilbert import (
    SIGMA_MINUS, SIGMA_PLUS, SIGMA_X, SIGMA_Y, SIGMA_Z,
    DensityOperator, HilbertLayout, LayoutError, QOperator,
    embed, embed_spin, expectation, identity, kron_compose,
    partial_trace, von_neumann_entropy,
)

from conftest import random_density


def test_pauli_algebra():
    assert np.allclose(SIGMA_X @ SIGMA_Y, 1j * SIGMA_Z)
    assert np.allclose(SIGMA_PLUS @ SIGMA_MINUS - SIGMA_MINUS @ SIGMA_PLUS, SIGMA_Z)
    # raising takes down to up in the (up, down) basis
    assert np.allclose(SIGMA_PLUS @ np.array([0, 1]), [1, 0])


def test_layout_dims_and_labels():
    lay = HilbertLayout(11, 2)
    assert lay.dims == (11, 2, 2)
    assert lay.dim == 44
    labels = lay.site_labels()
    assert labels[0] == -5 and labels[-1] == 5
    assert lay.site_index(0) == 5
    with pytest.raises(LayoutError):
        lay.site_index(6)
    assert list(lay.spin_up_count()) == [2, 1, 1, 0]


@pytest.mark.parametrize("bad", [0, -3, 2.5])
def test_layout_rejects_bad_sizes(bad):
    with pytest.raises(LayoutError):
        HilbertLayout(bad, 1)


def test_storage_policy():
    lay = HilbertLayout(41, 1)
    d = kron_compose(lay, [np.eye(41, k=1), None])
    assert d.is_sparse
    small = QOperator(HilbertLayout(1, 1), SIGMA_X)
    assert not small.is_sparse
    assert np.allclose(d.sparse().toarray(), d.dense())


def test_operator_arithmetic_and_adjoint():
    lay = HilbertLayout(3, 1)
    a = embed_spin(lay, 1, SIGMA_PLUS)
    b = embed_spin(lay, 1, SIGMA_MINUS)
    assert np.allclose((a @ b - b @ a).dense(), embed_spin(lay, 1, SIGMA_Z).dense())
    assert np.allclose(a.adjoint().dense(), b.dense())
    assert np.allclose((2.0 * a + a - a).dense(), 2 * a.dense())
    with pytest.raises(LayoutError):
        a @ identity(HilbertLayout(5, 1))


def test_embed_ordering_lattice_first():
    lay = HilbertLayout(3, 2)
    x = np.diag([-1.0, 0.0, 1.0])
    op = embed(lay, 0, x) @ embed_spin(lay, 2, SIGMA_Z)
    ref = np.kron(np.kron(x, np.eye(2)), SIGMA_Z)
    assert np.allclose(op.dense(), ref)


def test_density_validation():
    lay = HilbertLayout(1, 1)
    with pytest.raises(ValueError, match="Hermitian"):
        DensityOperator(lay, np.array([[0.5, 0.1], [0.0, 0.5]]))
    with pytest.raises(ValueError, match="trace"):
        DensityOperator(lay, np.eye(2))
    with pytest.raises(ValueError, match="eigenvalue"):
        DensityOperator(lay, np.diag([1.5, -0.5]))
    rho = DensityOperator.from_pure(lay, [1.0, 1.0])
    assert np.isclose(expectation(rho, QOperator(lay, SIGMA_X)), 1.0)


def test_entropy_basics():
    assert von_neumann_entropy(np.diag([1.0, 0.0])) == 0.0
    assert math.isclose(von_neumann_entropy(np.eye(4) / 4), math.log(4))
    with pytest.raises(ValueError):
        von_neumann_entropy(np.array([[0.5, 0.2], [0.0, 0.5]]))


def test_partial_trace_of_product_returns_factors(rng):
    lay = HilbertLayout(3, 2)
    f = [random_density(rng, 3), random_density(rng, 2), random_density(rng, 2)]
    rho = DensityOperator.product(lay, f)
    assert np.allclose(partial_trace(rho, "lattice").matrix, f[0])
    assert np.allclose(partial_trace(rho, 2).matrix, f[2])
    spins = partial_trace(rho, "spins")
    assert spins.layout == HilbertLayout(1, 2)
    assert np.allclose(spins.matrix, np.kron(f[1], f[2]))
    with pytest.raises(LayoutError):
        partial_trace(rho, [])


def test_pure_bipartite_entropies_match():
    # Schmidt form: equal entropies on both parts
    lay = HilbertLayout(3, 1)
    psi = np.zeros(6, complex)
    psi[0], psi[3], psi[5] = 0.6, 0.0, 0.8
    rho = DensityOperator.from_pure(lay, psi)
    assert math.isclose(von_neumann_entropy(partial_trace(rho, "lattice")),
                        von_neumann_entropy(partial_trace(rho, "spins")), abs_tol=1e-12)
    assert von_neumann_entropy(rho) < 1e-12


@given(st.integers(0, 2**32 - 1), st.integers(2, 4))
def test_entropy_inequalities(seed, n_sites):
    """Subadditivity and Araki-Lieb for random lattice-spin states."""
    rng = np.random.default_rng(seed)
    lay = HilbertLayout(n_sites, 1)
    rho = DensityOperator(lay, random_density(rng, lay.dim, rank=int(rng.integers(1, lay.dim + 1))))
    s = von_neumann_entropy(rho)
    sa = von_neumann_entropy(partial_trace(rho, "lattice"))
    sb = von_neumann_entropy(partial_trace(rho, "spins"))
    assert s <= sa + sb + 1e-10
    assert s >= abs(sa - sb) - 1e-10
    assert -1e-12 <= s <= math.log(lay.dim) + 1e-12


@given(st.integers(0, 2**32 - 1))
def test_partial_trace_preserves_trace_and_positivity(seed):
    rng = np.random.default_rng(seed)
    lay = HilbertLayout(3, 2)
    rho = DensityOperator(lay, random_density(rng, lay.dim))
    for keep in ("lattice", "spins", 1, [0, 2]):
        red = partial_trace(rho, keep)
        assert math.isclose(red.trace().real, 1.0, abs_tol=1e-12)
        assert red.eigenvalues()[0] > -1e-12
