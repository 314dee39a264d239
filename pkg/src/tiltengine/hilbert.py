"""Composite Hilbert space of one lattice particle and a register of spins.

Factor ordering is fixed: the lattice comes first, then spins in index order.
Within a spin factor the basis is (|up>, |down>), so sigma_z = diag(1, -1).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

SPARSE_FILL_THRESHOLD = 0.10
EIGEN_CLAMP = 1e-14
HERMITIAN_TOL = 1e-10

SIGMA_Z = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)
SIGMA_X = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
SIGMA_Y = np.array([[0.0, -1j], [1j, 0.0]], dtype=complex)
SIGMA_PLUS = np.array([[0.0, 1.0], [0.0, 0.0]], dtype=complex)
SIGMA_MINUS = np.array([[0.0, 0.0], [1.0, 0.0]], dtype=complex)


class LayoutError(ValueError):
    """Operators or factors do not match the Hilbert layout."""


@dataclass(frozen=True)
class HilbertLayout:
    n_sites: int
    n_spins: int = 0

    def __post_init__(self):
        if int(self.n_sites) != self.n_sites or self.n_sites < 1:
            raise LayoutError(f"n_sites must be a positive integer, got {self.n_sites!r}")
        if int(self.n_spins) != self.n_spins or self.n_spins < 0:
            raise LayoutError(f"n_spins must be a non-negative integer, got {self.n_spins!r}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.n_sites,) + (2,) * self.n_spins

    @property
    def spin_dim(self) -> int:
        return 2**self.n_spins

    @property
    def dim(self) -> int:
        return self.n_sites * self.spin_dim

    @property
    def n_subsystems(self) -> int:
        return 1 + self.n_spins

    def site_labels(self) -> np.ndarray:
        """Integer site labels, symmetric about zero for odd ``n_sites``."""
        return np.arange(self.n_sites) - (self.n_sites - 1) // 2

    def site_index(self, label: int) -> int:
        idx = int(label) + (self.n_sites - 1) // 2
        if not 0 <= idx < self.n_sites:
            raise LayoutError(f"site label {label} outside lattice of {self.n_sites} sites")
        return idx

    def spin_up_count(self) -> np.ndarray:
        """Number of up spins for every spin-register basis index."""
        s = np.arange(self.spin_dim)
        count = np.zeros(self.spin_dim, dtype=int)
        for j in range(self.n_spins):
            bit = (s >> (self.n_spins - 1 - j)) & 1
            count += 1 - bit
        return count


class QOperator:
    """Operator on the full composite space, stored sparse or dense by fill."""

    __slots__ = ("layout", "_m")

    def __init__(self, layout: HilbertLayout, matrix, storage: str = "auto"):
        shape = matrix.shape
        if shape != (layout.dim, layout.dim):
            raise LayoutError(f"matrix shape {shape} does not match layout dimension {layout.dim}")
        self.layout = layout
        if storage == "auto":
            nnz = matrix.nnz if sp.issparse(matrix) else np.count_nonzero(matrix)
            storage = "sparse" if nnz < SPARSE_FILL_THRESHOLD * layout.dim**2 else "dense"
        if storage == "sparse":
            m = sp.csr_matrix(matrix, dtype=complex)
            m.eliminate_zeros()
        elif storage == "dense":
            m = matrix.toarray() if sp.issparse(matrix) else np.array(matrix, dtype=complex)
        else:
            raise ValueError(f"unknown storage {storage!r}")
        self._m = m

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self._m)

    @property
    def matrix(self):
        return self._m

    def dense(self) -> np.ndarray:
        return self._m.toarray() if self.is_sparse else self._m.copy()

    def sparse(self) -> sp.csr_matrix:
        return self._m if self.is_sparse else sp.csr_matrix(self._m)

    def adjoint(self) -> "QOperator":
        return QOperator(self.layout, self._m.conj().T, "sparse" if self.is_sparse else "dense")

    dag = adjoint

    def _check(self, other: "QOperator"):
        if not isinstance(other, QOperator):
            raise TypeError(f"expected QOperator, got {type(other).__name__}")
        if other.layout != self.layout:
            raise LayoutError(f"layout mismatch: {self.layout} vs {other.layout}")

    def __matmul__(self, other):
        if isinstance(other, QOperator):
            self._check(other)
            return QOperator(self.layout, self._m @ other._m)
        return self._m @ other

    def __add__(self, other):
        self._check(other)
        return QOperator(self.layout, self._m + other._m)

    def __sub__(self, other):
        self._check(other)
        return QOperator(self.layout, self._m - other._m)

    def __mul__(self, scalar):
        return QOperator(self.layout, self._m * scalar)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __repr__(self):
        kind = "sparse" if self.is_sparse else "dense"
        return f"QOperator({self.layout}, {kind})"


def identity(layout: HilbertLayout) -> QOperator:
    return QOperator(layout, sp.identity(layout.dim, dtype=complex, format="csr"))


def zero(layout: HilbertLayout) -> QOperator:
    return QOperator(layout, sp.csr_matrix((layout.dim, layout.dim), dtype=complex))


def kron_compose(layout: HilbertLayout, factors: Sequence) -> QOperator:
    """Kronecker product of one matrix per subsystem, in layout order.

    ``None`` entries stand for the identity on that factor.
    """
    if len(factors) != layout.n_subsystems:
        raise LayoutError(f"expected {layout.n_subsystems} factors, got {len(factors)}")
    out = sp.identity(1, dtype=complex, format="csr")
    for dim, f in zip(layout.dims, factors):
        f = sp.identity(dim, dtype=complex, format="csr") if f is None else sp.csr_matrix(f, dtype=complex)
        if f.shape != (dim, dim):
            raise LayoutError(f"factor of shape {f.shape} on subsystem of dimension {dim}")
        out = sp.kron(out, f, format="csr")
    return QOperator(layout, out)


def embed(layout: HilbertLayout, subsystem: int, local) -> QOperator:
    """Place ``local`` on one subsystem (0 = lattice, j = spin j) with identities elsewhere."""
    if not 0 <= subsystem < layout.n_subsystems:
        raise LayoutError(f"subsystem {subsystem} out of range for {layout}")
    factors = [None] * layout.n_subsystems
    factors[subsystem] = local
    return kron_compose(layout, factors)


def embed_spin(layout: HilbertLayout, spin: int, local) -> QOperator:
    """Spin indices are 1-based, as in the physics notation."""
    if not 1 <= spin <= layout.n_spins:
        raise LayoutError(f"spin {spin} out of range 1..{layout.n_spins}")
    return embed(layout, spin, local)


class DensityOperator:
    """Dense density matrix tied to a layout.

    Construction validates the invariants; ``check=False`` skips that for
    intermediate integrator states.
    """

    __slots__ = ("layout", "matrix")

    def __init__(self, layout: HilbertLayout, matrix, check: bool = True,
                 trace_tol: float = 1e-8, psd_tol: float = 1e-8):
        m = matrix.toarray() if sp.issparse(matrix) else np.asarray(matrix, dtype=complex)
        if m.shape != (layout.dim, layout.dim):
            raise LayoutError(f"matrix shape {m.shape} does not match layout dimension {layout.dim}")
        self.layout = layout
        self.matrix = m
        if check:
            self.validate(trace_tol=trace_tol, psd_tol=psd_tol)

    @classmethod
    def from_pure(cls, layout: HilbertLayout, psi) -> "DensityOperator":
        psi = np.asarray(psi, dtype=complex).ravel()
        norm = np.linalg.norm(psi)
        if norm == 0:
            raise ValueError("zero state vector")
        psi = psi / norm
        return cls(layout, np.outer(psi, psi.conj()))

    @classmethod
    def product(cls, layout: HilbertLayout, factors: Sequence[np.ndarray]) -> "DensityOperator":
        if len(factors) != layout.n_subsystems:
            raise LayoutError(f"expected {layout.n_subsystems} factors, got {len(factors)}")
        m = np.ones((1, 1), dtype=complex)
        for f in factors:
            m = np.kron(m, np.asarray(f, dtype=complex))
        return cls(layout, m)

    def hermiticity_error(self) -> float:
        return float(np.max(np.abs(self.matrix - self.matrix.conj().T))) if self.matrix.size else 0.0

    def trace(self) -> complex:
        return complex(np.trace(self.matrix))

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(0.5 * (self.matrix + self.matrix.conj().T))

    def validate(self, herm_tol: float = HERMITIAN_TOL, trace_tol: float = 1e-8, psd_tol: float = 1e-8):
        herm = self.hermiticity_error()
        if herm > herm_tol:
            raise ValueError(f"density matrix not Hermitian: max |rho - rho^dag| = {herm:.3e}")
        tr = self.trace()
        if abs(tr - 1.0) > trace_tol:
            raise ValueError(f"density matrix trace {tr:.12g} differs from 1")
        lo = self.eigenvalues()[0]
        if lo < -psd_tol:
            raise ValueError(f"density matrix has eigenvalue {lo:.3e} < 0")
        return self

    def __repr__(self):
        return f"DensityOperator({self.layout})"


def expectation(rho: DensityOperator, op: QOperator) -> complex:
    """tr(rho A)."""
    if rho.layout != op.layout:
        raise LayoutError(f"layout mismatch: {rho.layout} vs {op.layout}")
    m = op.matrix
    if sp.issparse(m):
        return complex(m.T.multiply(rho.matrix).sum())
    return complex(np.einsum("ij,ji->", rho.matrix, m))


def _as_keep(layout: HilbertLayout, keep) -> list[int]:
    if keep == "lattice":
        keep = [0]
    elif keep == "spins":
        keep = list(range(1, layout.n_subsystems))
    elif isinstance(keep, int):
        keep = [keep]
    keep = sorted(set(int(k) for k in keep))
    if not keep:
        raise LayoutError("partial trace needs a nonempty set of subsystems to keep")
    if keep[0] < 0 or keep[-1] >= layout.n_subsystems:
        raise LayoutError(f"subsystem selector {keep} out of range for {layout}")
    return keep


def partial_trace(rho: DensityOperator, keep: "str | int | Iterable[int]") -> DensityOperator:
    """Reduced state on the kept subsystems.

    ``keep`` is ``"lattice"``, ``"spins"``, or subsystem indices (0 is the
    lattice). A spin-only result lives on a layout with a single site.
    """
    layout = rho.layout
    keep = _as_keep(layout, keep)
    dims = layout.dims
    n = len(dims)
    t = rho.matrix.reshape(dims + dims)
    letters = "abcdefghijklmnopqrstuvwxyz"
    row = list(letters[:n])
    col = list(letters[n:2 * n])
    for k in range(n):
        if k not in keep:
            col[k] = row[k]
    out_row = "".join(row[k] for k in keep)
    out_col = "".join(col[k] for k in keep)
    red = np.einsum("".join(row) + "".join(col) + "->" + out_row + out_col, t)
    d = int(np.prod([dims[k] for k in keep]))
    red = red.reshape(d, d)
    n_sites = dims[0] if 0 in keep else 1
    n_spins = len([k for k in keep if k > 0])
    return DensityOperator(HilbertLayout(n_sites, n_spins), red, check=False)


def entropy_from_eigenvalues(evals) -> float:
    p = np.asarray(evals, dtype=float)
    p = p[p > EIGEN_CLAMP]
    return float(-np.sum(p * np.log(p)))


def von_neumann_entropy(rho) -> float:
    """-tr(rho ln rho) in nats; accepts a DensityOperator or a square array."""
    m = rho.matrix if isinstance(rho, DensityOperator) else np.asarray(rho, dtype=complex)
    herm = float(np.max(np.abs(m - m.conj().T))) if m.size else 0.0
    if herm > HERMITIAN_TOL:
        raise ValueError(f"entropy of non-Hermitian matrix (max |rho - rho^dag| = {herm:.3e})")
    return entropy_from_eigenvalues(np.linalg.eigvalsh(0.5 * (m + m.conj().T)))
