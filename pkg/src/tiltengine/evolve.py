"""Time propagation of the full master equation and observable recording.

The generator conserves the excitation number K = (site index) + (number of up
spins) in the weak sense: H commutes with K and every jump operator shifts it
by exactly one. Matrix elements <a|rho|b> with a fixed coherence order
q = K_a - K_b therefore evolve among themselves, and only the orders present
in rho(0) are ever populated. The default ``"sector"`` engine stores exactly
those elements and applies the restricted Liouvillian; ``"dense"`` propagates
the full density matrix and is kept as a cross-check.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .hilbert import (
    SIGMA_X,
    SIGMA_Y,
    SIGMA_Z,
    DensityOperator,
    HilbertLayout,
    QOperator,
    embed_spin,
    entropy_from_eigenvalues,
)
from .model import (
    LindbladChannel,
    SystemConfig,
    build_dissipator,
    build_hamiltonian,
    build_lattice_ops,
    initial_density,
    make_rhs,
    spin_ops,
)

log = logging.getLogger(__name__)

TRACE_DRIFT_LIMIT = 1e-6
LEAKAGE_LIMIT = 1e-8
DEFAULT_GUARD = 5


class NumericalAbort(RuntimeError):
    """Integration stopped because an integrity guard tripped."""


class Support:
    """Index bookkeeping for the stored matrix elements of rho.

    ``a[i], b[i]`` are the full-space row and column of stored element ``i``;
    ``pos[a, b]`` inverts that map (-1 for elements that are identically zero).
    """

    def __init__(self, layout: HilbertLayout, q_values: Sequence[int] | None):
        self.layout = layout
        dim = layout.dim
        site = np.arange(dim) // layout.spin_dim
        self.K = site + np.tile(layout.spin_up_count(), layout.n_sites)
        if q_values is None:
            self.q_values = None
            a, b = np.divmod(np.arange(dim * dim), dim)
        else:
            self.q_values = tuple(sorted(set(int(q) for q in q_values)))
            if 0 not in self.q_values:
                raise ValueError("coherence order 0 must be present")
            if set(-q for q in self.q_values) != set(self.q_values):
                raise ValueError(f"coherence orders {self.q_values} not closed under negation")
            order = np.argsort(self.K, kind="stable")
            ks = self.K[order]
            starts = np.searchsorted(ks, np.arange(ks[-1] + 2))
            blocks = [order[starts[k]:starts[k + 1]] for k in range(ks[-1] + 1)]
            rows, cols = [], []
            for q in self.q_values:
                for k, blk in enumerate(blocks):
                    kc = k - q
                    if 0 <= kc < len(blocks) and len(blk) and len(blocks[kc]):
                        rr, cc = np.meshgrid(blk, blocks[kc], indexing="ij")
                        rows.append(rr.ravel())
                        cols.append(cc.ravel())
            a = np.concatenate(rows)
            b = np.concatenate(cols)
            self.blocks = blocks
        self.a = a.astype(np.int64)
        self.b = b.astype(np.int64)
        self.size = self.a.size
        self.pos = np.full((dim, dim), -1, dtype=np.int64)
        self.pos[self.a, self.b] = np.arange(self.size)
        self.herm_perm = self.pos[self.b, self.a]
        if np.any(self.herm_perm < 0):
            raise ValueError("support is not closed under transposition")
        self.diag = self.pos[np.arange(dim), np.arange(dim)]

    @classmethod
    def from_density(cls, rho: DensityOperator, tol: float = 0.0) -> "Support":
        layout = rho.layout
        site = np.arange(layout.dim) // layout.spin_dim
        kk = site + np.tile(layout.spin_up_count(), layout.n_sites)
        ii, jj = np.nonzero(np.abs(rho.matrix) > tol)
        return cls(layout, np.unique(kk[ii] - kk[jj]))

    @classmethod
    def full(cls, layout: HilbertLayout) -> "Support":
        return cls(layout, None)

    @property
    def is_block_diagonal(self) -> bool:
        return self.q_values == (0,)

    def from_dense(self, m: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(m[self.a, self.b], dtype=complex)

    def to_dense(self, x: np.ndarray) -> np.ndarray:
        d = self.layout.dim
        m = np.zeros((d, d), dtype=complex)
        m[self.a, self.b] = x
        return m

    def hermitize(self, x: np.ndarray) -> np.ndarray:
        return 0.5 * (x + np.conj(x[self.herm_perm]))

    def gather(self, op: QOperator) -> tuple[np.ndarray, np.ndarray]:
        """Positions and weights such that tr(rho A) = weights @ x[positions]."""
        coo = op.sparse().tocoo()
        p = self.pos[coo.col, coo.row]
        keep = p >= 0
        return p[keep], coo.data[keep].astype(complex)

    def block_index(self) -> np.ndarray:
        """(n_blocks, S, S) positions of every K block, -1 padded."""
        s = self.layout.spin_dim
        out = np.full((len(self.blocks), s, s), -1, dtype=np.int64)
        for k, blk in enumerate(self.blocks):
            n = len(blk)
            if n:
                out[k, :n, :n] = self.pos[np.ix_(blk, blk)]
        return out


def _expand(targets_row, targets_other, csr: sp.csr_matrix):
    """For each target t, list (t, column, value) over the nonzeros of row targets_row[t]."""
    counts = csr.indptr[targets_row + 1] - csr.indptr[targets_row]
    t = np.repeat(np.arange(targets_row.size), counts)
    first = np.repeat(csr.indptr[targets_row], counts)
    offsets = np.arange(t.size) - np.repeat(np.cumsum(counts) - counts, counts)
    k = first + offsets
    return t, csr.indices[k], csr.data[k], targets_other[t]


def restricted_liouvillian(support: Support, hamiltonian: QOperator,
                           channels: Sequence[LindbladChannel]) -> sp.csr_matrix:
    """Sparse generator acting on the stored elements of ``support``."""
    h = hamiltonian.sparse()
    if channels:
        loss = sum(c.rate * (c.jump.adjoint() @ c.jump).sparse() for c in channels)
        h_eff = (h - 0.5j * loss).tocsr()
    else:
        h_eff = sp.csr_matrix(h)
    a, b, pos = support.a, support.b, support.pos
    rows, cols, vals = [], [], []

    def add(t, src, v):
        keep = src >= 0
        rows.append(t[keep])
        cols.append(src[keep])
        vals.append(v[keep])

    # -i H_eff rho
    t, c, v, bb = _expand(a, b, h_eff.tocsr())
    add(t, pos[c, bb], -1j * v)
    # +i rho H_eff^dag : (rho B)_{ab} = sum_c rho_{ac} B_{cb}, rows of B^T
    t, c, v, aa = _expand(b, a, h_eff.conj().tocsr())
    add(t, pos[aa, c], 1j * v)
    for ch in channels:
        l = ch.jump.sparse().tocsr()
        lc = l.conj().tocsr()
        t1, c1, v1, b1 = _expand(a, b, l)
        t2, d2, v2, c2 = _expand(b1, c1, lc)
        add(t1[t2], pos[c2, d2], ch.rate * v1[t2] * v2)
    lsup = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(support.size, support.size)).tocsr()
    lsup.sum_duplicates()
    return lsup


def _max_abs(m) -> float:
    m = sp.csr_matrix(m)
    return float(abs(m).max()) if m.nnz else 0.0


def check_symmetry(layout: HilbertLayout, hamiltonian: QOperator,
                   channels: Sequence[LindbladChannel], tol: float = 1e-12):
    """Verify [H, K] = 0 and [K, L] = +/- L, which make the sector restriction exact."""
    site = np.arange(layout.dim) // layout.spin_dim
    k = sp.diags(site + np.tile(layout.spin_up_count(), layout.n_sites)).astype(complex)
    h = hamiltonian.sparse()
    if _max_abs(h @ k - k @ h) > tol:
        raise ValueError("Hamiltonian does not conserve the excitation number")
    for ch in channels:
        l = ch.jump.sparse()
        comm = k @ l - l @ k
        if min(_max_abs(comm - l), _max_abs(comm + l)) > tol:
            raise ValueError(f"channel {ch.label} does not shift K by one")


def rk4_step(x: np.ndarray, f: Callable[[np.ndarray], np.ndarray], dt: float) -> np.ndarray:
    k1 = f(x)
    k2 = f(x + (0.5 * dt) * k1)
    k3 = f(x + (0.5 * dt) * k2)
    k4 = f(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step_rk4(rho, rhs: Callable[[np.ndarray], np.ndarray], dt: float) -> DensityOperator:
    """One classical RK4 step of a dense density matrix, re-symmetrized."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    m = rho.matrix if isinstance(rho, DensityOperator) else np.asarray(rho, dtype=complex)
    layout = rho.layout if isinstance(rho, DensityOperator) else HilbertLayout(m.shape[0])
    out = rk4_step(m, rhs, dt)
    return DensityOperator(layout, 0.5 * (out + out.conj().T), check=False)


class Propagator:
    """RK4 propagation of the stored elements of rho on a given support."""

    def __init__(self, config: SystemConfig, engine: str = "sector", rho0: DensityOperator | None = None):
        self.config = config
        self.layout = config.layout
        self.H = build_hamiltonian(config)
        self.channels = build_dissipator(config)
        rho0 = rho0 if rho0 is not None else initial_density(config)
        self.engine = engine
        if engine == "sector":
            check_symmetry(self.layout, self.H, self.channels)
            self.support = Support.from_density(rho0)
            self.L = restricted_liouvillian(self.support, self.H, self.channels)
            self.rhs = self.L.__matmul__
        elif engine == "dense":
            self.support = Support.full(self.layout)
            dense_rhs = make_rhs(self.H, self.channels)
            d = self.layout.dim
            self.rhs = lambda x: dense_rhs(x.reshape(d, d)).ravel()
        else:
            raise ValueError(f"unknown engine {engine!r}")
        self.x0 = self.support.from_dense(rho0.matrix)

    def step(self, x: np.ndarray, dt: float, measure: bool = False) -> np.ndarray:
        """One RK4 step followed by symmetrization.

        With ``measure`` the anti-Hermitian part produced by the step, before it
        is removed, is stored in ``last_hermiticity``.
        """
        y = rk4_step(x, self.rhs, dt)
        if measure:
            self.last_hermiticity = float(np.max(np.abs(y - np.conj(y[self.support.herm_perm])), initial=0.0))
        return self.support.hermitize(y)


def check_boundary(populations: np.ndarray, guard_width: int = DEFAULT_GUARD) -> float:
    """Probability mass in the ``guard_width`` outermost sites at each edge."""
    if guard_width < 1:
        raise ValueError("guard_width must be >= 1")
    p = np.asarray(populations, dtype=float)
    if p.ndim == 2:
        p = np.real(np.diag(p))
    if 2 * guard_width >= p.size:
        return float(p.sum())
    return float(p[:guard_width].sum() + p[-guard_width:].sum())


@dataclass
class ObservableRecord:
    t: float
    mean_x: float
    var_x: float
    d_expect: complex
    bloch: tuple
    s_total: float
    s_particle: float
    leakage: float
    v_inst: float = 0.0
    trace: float = 1.0
    min_eig: float = float("nan")
    p_n: np.ndarray | None = None


class Observables:
    """Precomputed gathers for every recorded quantity on one support."""

    def __init__(self, layout: HilbertLayout, support: Support, spins: Sequence, guard_width: int = DEFAULT_GUARD):
        self.layout = layout
        self.support = support
        self.guard_width = guard_width
        self.labels = layout.site_labels().astype(float)
        lat = build_lattice_ops(layout)
        self._d = support.gather(lat["d"])
        self._bloch = []
        self._dsp = []
        for j, params in enumerate(spins, start=1):
            self._bloch.append(tuple(support.gather(embed_spin(layout, j, m)) for m in (SIGMA_X, SIGMA_Y, SIGMA_Z)))
            self._dsp.append((params.g, support.gather(lat["d"] @ spin_ops(layout, j)["sp"])))
        if support.q_values is not None and support.is_block_diagonal:
            self._blocks = support.block_index()
        else:
            self._blocks = None

    @staticmethod
    def _ev(x, gathered) -> complex:
        p, w = gathered
        return complex(w @ x[p]) if p.size else 0.0j

    def populations(self, x: np.ndarray) -> np.ndarray:
        diag = np.real(x[self.support.diag])
        return diag.reshape(self.layout.n_sites, self.layout.spin_dim).sum(axis=1)

    def d_expect(self, x) -> complex:
        return self._ev(x, self._d)

    def velocity(self, x) -> float:
        """d<X>/dt = i sum_j g_j <d sigma^+_j> + c.c. from the Heisenberg equation."""
        return float(sum(-2.0 * g * self._ev(x, gat).imag for g, gat in self._dsp))

    def entropy_eigenvalues(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Eigenvalues of rho and of the reduced particle state."""
        if self._blocks is not None:
            xe = np.append(x, 0.0)
            blocks = xe[self._blocks]
            ev = np.linalg.eigvalsh(0.5 * (blocks + np.conj(np.swapaxes(blocks, 1, 2)))).ravel()
            return ev, self.populations(x)
        m = self.support.to_dense(x)
        ev = np.linalg.eigvalsh(0.5 * (m + m.conj().T))
        n, s = self.layout.n_sites, self.layout.spin_dim
        red = np.einsum("isjs->ij", m.reshape(n, s, n, s))
        evp = np.linalg.eigvalsh(0.5 * (red + red.conj().T))
        return ev, evp

    def record(self, t: float, x: np.ndarray, entropies: bool = True, with_pn: bool = False) -> ObservableRecord:
        p = self.populations(x)
        tr = float(p.sum())
        mean = float(self.labels @ p) / tr
        var = float((self.labels**2) @ p) / tr - mean**2
        bloch = tuple(tuple(self._ev(x, g).real for g in trio) for trio in self._bloch)
        if entropies:
            ev, evp = self.entropy_eigenvalues(x)
            s_t, s_p, lo = entropy_from_eigenvalues(ev), entropy_from_eigenvalues(evp), float(ev.min())
        else:
            s_t = s_p = lo = float("nan")
        return ObservableRecord(
            t=t, mean_x=mean, var_x=var, d_expect=self.d_expect(x), bloch=bloch,
            s_total=s_t, s_particle=s_p, leakage=check_boundary(p, self.guard_width),
            v_inst=self.velocity(x), trace=tr, min_eig=lo, p_n=p.copy() if with_pn else None,
        )


@dataclass
class TimeSeries:
    config: SystemConfig
    records: list = field(default_factory=list)
    dt: float = 0.0
    engine: str = "sector"
    truncated: bool = False
    trip_time: float | None = None
    trace_drift: float = 0.0
    coherence_error: list = field(default_factory=list)
    hermiticity_error: float = 0.0
    d0: complex = 0j

    def coherence_relative(self, leakage_below: float = 1e-10) -> float:
        """Largest |<d>(t) - d0 exp(-i tilt t)| / |d0| over samples with leakage below the cut.

        Absolute when d0 = 0.
        """
        lk = self.column("leakage")
        err = np.asarray(self.coherence_error)[lk < leakage_below]
        scale = abs(self.d0) if abs(self.d0) > 0 else 1.0
        return float(err.max(initial=0.0) / scale)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    @property
    def t(self) -> np.ndarray:
        return self.column("t")

    def bloch(self, j: int = 0) -> np.ndarray:
        """(n_samples, 3) array of the Bloch vector of spin ``j`` (0-based)."""
        return np.array([r.bloch[j] for r in self.records])

    def csv_header(self) -> list[str]:
        head = ["t", "mean_x", "var_x", "re_d", "im_d", "s_total", "s_particle", "leakage"]
        for j in range(1, self.config.n_spins + 1):
            head += [f"sx_{j}", f"sy_{j}", f"sz_{j}"]
        return head

    def rows(self):
        for r in self.records:
            row = [r.t, r.mean_x, r.var_x, r.d_expect.real, r.d_expect.imag, r.s_total, r.s_particle, r.leakage]
            for trio in r.bloch:
                row += list(trio)
            yield row

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.csv_header())
            for row in self.rows():
                w.writerow([format_float(v) for v in row])
        return path

    def write_pn(self, directory) -> list[Path]:
        directory = Path(directory)
        labels = self.config.layout.site_labels()
        out = []
        for r in self.records:
            if r.p_n is None:
                continue
            path = directory / f"pn_{format_float(r.t)}.csv"
            write_pn_csv(path, labels, r.p_n)
            out.append(path)
        return out


def format_float(v) -> str:
    if v is None:
        return ""
    v = float(v)
    if math.isnan(v):
        return ""
    return f"{v:.17g}"


def write_pn_csv(path, labels, p) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "p"])
        for n, v in zip(labels, p):
            w.writerow([int(n), format_float(v)])
    return path


def evolve_record(config: SystemConfig, engine: str = "sector", entropies: bool = True,
                  record_pn: bool | Sequence[float] = False, guard_width: int = DEFAULT_GUARD,
                  rho0: DensityOperator | None = None, entropy_every: int = 1) -> TimeSeries:
    """Integrate the master equation to ``config.time.t_final`` and sample observables.

    ``record_pn`` is True for every sample, or a list of times (nearest sample
    is stored). Entropies and the spectrum are computed on every
    ``entropy_every``-th sample (NaN elsewhere). Raises NumericalAbort on trace drift; a leakage trip ends the
    run early with ``truncated`` set.
    """
    prop = Propagator(config, engine, rho0)
    obs = Observables(config.layout, prop.support, config.spins, guard_width)
    n_steps = max(1, math.ceil(config.time.t_final / config.dt - 1e-9))
    dt = config.time.t_final / n_steps
    stride = config.time.sample_stride
    series = TimeSeries(config=config, dt=dt, engine=engine)
    pn_times = None if isinstance(record_pn, bool) else sorted(record_pn)
    pn_pending = list(pn_times) if pn_times is not None else []

    x = prop.x0.copy()
    d0 = obs.d_expect(x)
    series.d0 = d0
    for k in range(n_steps + 1):
        if k % stride == 0 or k == n_steps:
            t = k * dt
            want_pn = record_pn is True
            if pn_pending and t + 0.5 * dt * stride >= pn_pending[0]:
                want_pn = True
                while pn_pending and t + 0.5 * dt * stride >= pn_pending[0]:
                    pn_pending.pop(0)
            with_s = entropies and (len(series.records) % entropy_every == 0 or k == n_steps)
            rec = obs.record(t, x, entropies=with_s, with_pn=want_pn)
            drift = abs(rec.trace - 1.0)
            series.trace_drift = max(series.trace_drift, drift)
            if drift > TRACE_DRIFT_LIMIT:
                raise NumericalAbort(f"trace drift {drift:.3e} at t = {t:.6g} exceeds {TRACE_DRIFT_LIMIT}")
            if rec.leakage > LEAKAGE_LIMIT:
                series.truncated = True
                series.trip_time = t
                log.warning("leakage %.3e past guard band at t = %.6g; run truncated", rec.leakage, t)
                break
            series.records.append(rec)
            series.coherence_error.append(abs(rec.d_expect - d0 * np.exp(-1j * config.tilt * t)))
        if k < n_steps:
            measure = (k + 1) % stride == 0 or k + 1 == n_steps
            x = prop.step(x, dt, measure)
            if measure:
                series.hermiticity_error = max(series.hermiticity_error, prop.last_hermiticity)
    return series
