"""Physical model: tilted lattice, spins, Jaynes-Cummings coupling and baths.

Units: hbar = 1 and every energy is an angular frequency. The lattice tilt is
a single parameter ``tilt`` (written Delta or nu in the physics literature).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .hilbert import (
    SIGMA_MINUS,
    SIGMA_PLUS,
    SIGMA_Z,
    DensityOperator,
    HilbertLayout,
    QOperator,
    embed,
    embed_spin,
    zero,
)

MIN_SITES = 11


class ConfigError(ValueError):
    """Invalid model configuration; ``key`` names the offending entry."""

    def __init__(self, message: str, key: str = ""):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key
        self.message = message


@dataclass(frozen=True)
class SpinParams:
    omega: float
    g: float
    lambda_plus: float
    lambda_minus: float

    def __post_init__(self):
        if self.lambda_plus < 0:
            raise ConfigError(f"must be >= 0, got {self.lambda_plus}", "lambda_plus")
        if self.lambda_minus < 0:
            raise ConfigError(f"must be >= 0, got {self.lambda_minus}", "lambda_minus")
        if self.lambda_plus + self.lambda_minus <= 0:
            raise ConfigError("lambda_plus + lambda_minus must be positive", "lambda_plus")

    @property
    def lam(self) -> float:
        """Mean bath rate (lambda_plus + lambda_minus) / 2."""
        return 0.5 * (self.lambda_plus + self.lambda_minus)

    @property
    def bias(self) -> float:
        return self.lambda_plus - self.lambda_minus

    @property
    def p_up(self) -> float:
        return self.lambda_plus / (2.0 * self.lam)

    @property
    def sz_bare(self) -> float:
        """Steady-state <sigma_z> of the spin with the coupling switched off."""
        return self.bias / (2.0 * self.lam)

    @classmethod
    def from_mean_rate(cls, omega: float, g: float, lambda_plus: float, lam: float) -> "SpinParams":
        return cls(omega, g, lambda_plus, 2.0 * lam - lambda_plus)


PARTICLE_KINDS = ("localized", "two_site", "gaussian")
SPIN_KINDS = ("up", "down", "bare_steady", "bloch")


@dataclass(frozen=True)
class ParticleState:
    kind: str = "localized"
    n0: int = 0
    phase: float = 0.0
    width: float = 1.0
    phase_gradient: float = 0.0

    def __post_init__(self):
        if self.kind not in PARTICLE_KINDS:
            raise ConfigError(f"unknown particle state {self.kind!r}", "initial.particle.kind")
        if self.kind == "gaussian" and self.width <= 0:
            raise ConfigError("gaussian width must be positive", "initial.particle.width")


@dataclass(frozen=True)
class SpinState:
    kind: str = "bare_steady"
    theta: float = 0.0
    phi: float = 0.0

    def __post_init__(self):
        if self.kind not in SPIN_KINDS:
            raise ConfigError(f"unknown spin state {self.kind!r}", "initial.spins")


@dataclass(frozen=True)
class Amplitude:
    """One component of an explicit pure initial state: site label, spin string, amplitude."""

    site: int
    spins: str
    amp: complex


@dataclass(frozen=True)
class InitialStateSpec:
    particle: ParticleState = field(default_factory=ParticleState)
    spins: tuple = ()
    entangled: tuple | None = None


@dataclass(frozen=True)
class TimeControls:
    t_final: float = 100.0
    dt: float | None = None
    sample_stride: int = 10

    def __post_init__(self):
        if self.dt is not None and self.dt <= 0:
            raise ConfigError(f"must be > 0, got {self.dt}", "time.dt")
        if self.t_final <= 0 or (self.dt is not None and self.t_final < self.dt):
            raise ConfigError(f"t_final must be >= dt, got {self.t_final}", "time.t_final")
        if int(self.sample_stride) != self.sample_stride or self.sample_stride < 1:
            raise ConfigError(f"must be a positive integer, got {self.sample_stride}", "time.sample_stride")


@dataclass(frozen=True)
class SystemConfig:
    tilt: float
    n_sites: int
    spins: tuple = ()
    initial: InitialStateSpec = field(default_factory=InitialStateSpec)
    time: TimeControls = field(default_factory=TimeControls)
    units: str = "tilt"

    def __post_init__(self):
        if int(self.n_sites) != self.n_sites or self.n_sites % 2 == 0:
            raise ConfigError(f"must be an odd integer, got {self.n_sites}", "n_sites")
        if self.n_sites < MIN_SITES:
            raise ConfigError(f"must be >= {MIN_SITES}, got {self.n_sites}", "n_sites")
        object.__setattr__(self, "spins", tuple(self.spins))
        for j, s in enumerate(self.spins):
            if not isinstance(s, SpinParams):
                raise ConfigError("expected SpinParams", f"spins[{j}]")
        init_spins = self.initial.spins
        if init_spins and len(init_spins) != len(self.spins):
            raise ConfigError(f"{len(init_spins)} spin states for {len(self.spins)} spins", "initial.spins")
        if self.time.dt is not None and self.time.t_final < self.time.dt:
            raise ConfigError("t_final must be >= dt", "time.t_final")

    @property
    def layout(self) -> HilbertLayout:
        return HilbertLayout(self.n_sites, len(self.spins))

    @property
    def n_spins(self) -> int:
        return len(self.spins)

    def default_dt(self) -> float:
        scale = max([abs(self.tilt)] + [abs(s.omega) for s in self.spins] + [s.lam for s in self.spins])
        return 2.0 * math.pi / (200.0 * scale)

    @property
    def dt(self) -> float:
        return self.time.dt if self.time.dt is not None else self.default_dt()

    def velocity_bound(self) -> float:
        """Sum over spins of (lambda_plus - lambda_minus) / 2."""
        return sum(0.5 * s.bias for s in self.spins)

    def replace(self, **changes) -> "SystemConfig":
        return replace(self, **changes)

    def with_spin(self, j: int, **changes) -> "SystemConfig":
        spins = list(self.spins)
        spins[j] = replace(spins[j], **changes)
        return replace(self, spins=tuple(spins))


@dataclass(frozen=True)
class LindbladChannel:
    rate: float
    jump: QOperator
    label: str = ""

    def __post_init__(self):
        if self.rate < 0:
            raise ConfigError(f"negative rate {self.rate}", "rate")


def build_lattice_ops(layout: HilbertLayout) -> dict[str, QOperator]:
    """Position X = sum_n n|n><n| and hop d = sum_n |n><n+1| (hard walls)."""
    if layout.n_sites < 2:
        raise ValueError("lattice operators need at least two sites")
    labels = layout.site_labels().astype(float)
    x = sp.diags(labels).astype(complex)
    d = sp.diags(np.ones(layout.n_sites - 1), 1).astype(complex)
    return {"X": embed(layout, 0, x), "d": embed(layout, 0, d)}


def spin_ops(layout: HilbertLayout, j: int) -> dict[str, QOperator]:
    return {
        "sz": embed_spin(layout, j, SIGMA_Z),
        "sp": embed_spin(layout, j, SIGMA_PLUS),
        "sm": embed_spin(layout, j, SIGMA_MINUS),
    }


def build_interaction(config: SystemConfig, layout: HilbertLayout | None = None) -> QOperator:
    layout = layout or config.layout
    d = build_lattice_ops(layout)["d"]
    h = zero(layout)
    for j, s in enumerate(config.spins, start=1):
        ops = spin_ops(layout, j)
        h = h + s.g * (d @ ops["sp"] + d.adjoint() @ ops["sm"])
    return h


def build_hamiltonian(config: SystemConfig, layout: HilbertLayout | None = None) -> QOperator:
    """H0 + H_int = tilt X + sum_j omega_j/2 sz_j + sum_j g_j (d sp_j + d^dag sm_j)."""
    layout = layout or config.layout
    h = config.tilt * build_lattice_ops(layout)["X"]
    for j, s in enumerate(config.spins, start=1):
        h = h + (0.5 * s.omega) * spin_ops(layout, j)["sz"]
    return h + build_interaction(config, layout)


def build_dissipator(config: SystemConfig, layout: HilbertLayout | None = None) -> list[LindbladChannel]:
    """Decay (lambda_minus, sigma^-) and pumping (lambda_plus, sigma^+) per spin.

    Zero-rate channels are dropped.
    """
    layout = layout or config.layout
    channels = []
    for j, s in enumerate(config.spins, start=1):
        ops = spin_ops(layout, j)
        if s.lambda_minus > 0:
            channels.append(LindbladChannel(s.lambda_minus, ops["sm"], f"decay_{j}"))
        if s.lambda_plus > 0:
            channels.append(LindbladChannel(s.lambda_plus, ops["sp"], f"pump_{j}"))
    return channels


def make_rhs(hamiltonian: QOperator, channels: Sequence[LindbladChannel]) -> Callable[[np.ndarray], np.ndarray]:
    """Return f(rho) = -i[H, rho] + sum_c rate_c (L rho L^dag - {L^dag L, rho}/2) on dense arrays."""
    h = hamiltonian.sparse()
    if channels:
        loss = sum(c.rate * (c.jump.adjoint() @ c.jump).sparse() for c in channels)
        h_eff = (h - 0.5j * loss).tocsr()
    else:
        h_eff = h
    h_eff_dag = h_eff.conj().T.tocsr()
    jumps = [(c.rate, c.jump.sparse(), c.jump.sparse().conj().T.tocsr()) for c in channels]

    def rhs(rho: np.ndarray) -> np.ndarray:
        out = -1j * (h_eff @ rho - (h_eff_dag.T @ rho.T).T)
        for rate, l, ldag in jumps:
            out += rate * (l @ (ldag.T @ rho.T).T)
        return out

    return rhs


def lindblad_rhs(rho, hamiltonian: QOperator, channels: Sequence[LindbladChannel]) -> np.ndarray:
    m = rho.matrix if isinstance(rho, DensityOperator) else np.asarray(rho, dtype=complex)
    return make_rhs(hamiltonian, channels)(m)


def bare_spin_state(s: SpinParams) -> np.ndarray:
    return np.diag([s.p_up, 1.0 - s.p_up]).astype(complex)


def _spin_factor(state: SpinState, params: SpinParams) -> np.ndarray:
    if state.kind == "up":
        return np.diag([1.0, 0.0]).astype(complex)
    if state.kind == "down":
        return np.diag([0.0, 1.0]).astype(complex)
    if state.kind == "bare_steady":
        return bare_spin_state(params)
    v = np.array([math.cos(state.theta / 2), np.exp(1j * state.phi) * math.sin(state.theta / 2)])
    return np.outer(v, v.conj())


GAUSSIAN_CUTOFF = 6.0


def particle_amplitudes(p: ParticleState, layout: HilbertLayout) -> np.ndarray:
    psi = np.zeros(layout.n_sites, dtype=complex)
    i0 = layout.site_index(p.n0)
    if p.kind == "localized":
        psi[i0] = 1.0
    elif p.kind == "two_site":
        # <d> = exp(-i phase) / 2
        psi[i0] = 1.0
        psi[layout.site_index(p.n0 + 1)] = np.exp(-1j * p.phase)
    else:
        n = layout.site_labels()
        offset = n - p.n0
        amp = np.exp(-(offset**2) / (4.0 * p.width**2) + 1j * p.phase_gradient * n)
        amp[np.abs(offset) > GAUSSIAN_CUTOFF * p.width] = 0.0
        psi = amp
    return psi / np.linalg.norm(psi)


def _entangled_state(entries, layout: HilbertLayout) -> np.ndarray:
    psi = np.zeros(layout.dim, dtype=complex)
    for e in entries:
        if len(e.spins) != layout.n_spins or set(e.spins) - set("ud"):
            raise ConfigError(f"spin string {e.spins!r} must use 'u'/'d', one per spin", "initial.entangled")
        s = 0
        for ch in e.spins:
            s = 2 * s + (0 if ch == "u" else 1)
        psi[layout.site_index(e.site) * layout.spin_dim + s] += complex(e.amp)
    if not np.any(psi):
        raise ConfigError("entangled state has zero norm", "initial.entangled")
    return psi


def initial_density(config: SystemConfig) -> DensityOperator:
    """Build rho(0) analytically from the initial-state specification."""
    layout = config.layout
    init = config.initial
    if init.entangled:
        return DensityOperator.from_pure(layout, _entangled_state(init.entangled, layout))
    psi = particle_amplitudes(init.particle, layout)
    factors = [np.outer(psi, psi.conj())]
    states = init.spins or tuple(SpinState() for _ in config.spins)
    for st, params in zip(states, config.spins):
        factors.append(_spin_factor(st, params))
    return DensityOperator.product(layout, factors)
