"""Separable (product-state) approximation of the spin dynamics.

Under the product ansatz each spin sees the load only through the exact
coherence <d(t)> = d0 exp(-i tilt t), which acts as a classical drive. In the
frame rotating with that drive, (<s->, <s+>, <sz>) obey an affine linear ODE
with a constant matrix, so the long-time state is a fixed point that can be
found by a 3x3 linear solve.

Conventions: lam = (lambda_plus + lambda_minus)/2, detuning = omega - tilt,
G = g |d0|, d0 = |d0| exp(-i phi), <s~-> = <s-> exp(i (tilt t + phi)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import SpinParams, SystemConfig


@dataclass(frozen=True)
class MeanFieldState:
    s_minus: np.ndarray
    s_z: np.ndarray
    d0_mag: float = 0.0
    phi: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "s_minus", np.atleast_1d(np.asarray(self.s_minus, dtype=complex)))
        object.__setattr__(self, "s_z", np.atleast_1d(np.asarray(self.s_z, dtype=float)))

    @property
    def s_plus(self) -> np.ndarray:
        return np.conj(self.s_minus)

    def bloch_excess(self) -> np.ndarray:
        """s_z^2 + 4|s-|^2 - 1 per spin; non-positive inside the Bloch ball."""
        return self.s_z**2 + 4.0 * np.abs(self.s_minus) ** 2 - 1.0


@dataclass(frozen=True)
class DriveMatrix:
    m: np.ndarray
    inhom: np.ndarray


def drive_matrix(spin: SpinParams, tilt: float, d0_mag: float) -> DriveMatrix:
    """Generator of (<s~->, <s~+>, <sz>) in the rotating frame."""
    lam, det, G = spin.lam, spin.omega - tilt, spin.g * d0_mag
    m = np.array([
        [-lam - 1j * det, 0.0, 1j * G],
        [0.0, -lam + 1j * det, -1j * G],
        [2j * G, -2j * G, -2.0 * lam],
    ], dtype=complex)
    return DriveMatrix(m, np.array([0.0, 0.0, spin.bias], dtype=complex))


def total_rate_matrix(spin: SpinParams, tilt: float, d0_mag: float) -> np.ndarray:
    """The drive matrix written with the total rate lambda_plus + lambda_minus.

    It is the complex conjugate of :func:`drive_matrix`; the two describe the
    same real dynamics with the roles of the two coherences exchanged.
    """
    total, det, G = spin.lambda_plus + spin.lambda_minus, spin.omega - tilt, spin.g * d0_mag
    return np.array([
        [-total / 2 + 1j * det, 0.0, -1j * G],
        [0.0, -total / 2 - 1j * det, 1j * G],
        [-2j * G, 2j * G, -total],
    ], dtype=complex)


def meanfield_rhs(state: MeanFieldState, spins, tilt: float) -> MeanFieldState:
    """Time derivative of the rotating-frame state; <s~+> is taken as conj(<s~->)."""
    ds_minus, ds_z = [], []
    for j, spin in enumerate(spins):
        dm = drive_matrix(spin, tilt, state.d0_mag)
        v = np.array([state.s_minus[j], np.conj(state.s_minus[j]), state.s_z[j]])
        dv = dm.m @ v + dm.inhom
        if abs(dv[1] - np.conj(dv[0])) > 1e-12 * (1.0 + abs(dv[0])):
            raise AssertionError("coherence derivatives lost conjugate symmetry")
        ds_minus.append(dv[0])
        ds_z.append(dv[2].real)
    return MeanFieldState(np.array(ds_minus), np.array(ds_z), state.d0_mag, state.phi)


def steady_state_spin(spin: SpinParams, tilt: float, d0_mag: float) -> MeanFieldState:
    """Fixed point of the rotating-frame equations from M x = -inhom."""
    if spin.lam <= 0:
        raise ValueError("steady state requires lambda_plus + lambda_minus > 0")
    dm = drive_matrix(spin, tilt, d0_mag)
    x = np.linalg.solve(dm.m, -dm.inhom)
    return MeanFieldState(np.array([x[0]]), np.array([x[2].real]), d0_mag)


def closed_form_sigma_plus(spin: SpinParams, tilt: float, d0_mag: float) -> complex:
    """Closed form of the steady <s~+>, with total rate lambda_plus + lambda_minus."""
    total, det, g = spin.lambda_plus + spin.lambda_minus, spin.omega - tilt, spin.g
    num = 2.0 * d0_mag * g * (2.0 * det - 1j * total)
    den = 8.0 * d0_mag**2 * g**2 + total**2 + 4.0 * det**2
    return complex((spin.bias / total) * num / den)


def integrate_rotating(spin: SpinParams, tilt: float, d0_mag: float, t_final: float,
                       dt: float = 0.05, x0=None) -> np.ndarray:
    """RK4 integration of the affine rotating-frame ODE; returns the final 3-vector."""
    dm = drive_matrix(spin, tilt, d0_mag)
    m, c = dm.m, dm.inhom
    x = np.array([0.0, 0.0, spin.sz_bare], dtype=complex) if x0 is None else np.asarray(x0, dtype=complex)
    n = max(1, math.ceil(t_final / dt))
    h = t_final / n
    for _ in range(n):
        k1 = m @ x + c
        k2 = m @ (x + 0.5 * h * k1) + c
        k3 = m @ (x + 0.5 * h * k2) + c
        k4 = m @ (x + h * k3) + c
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


@dataclass(frozen=True)
class SeparableVelocity:
    value: float
    closed_form: float

    @property
    def discrepancy(self) -> float:
        """Relative difference between the linear-solve route and the closed-form expression."""
        scale = max(abs(self.value), abs(self.closed_form))
        return abs(self.value - self.closed_form) / scale if scale else 0.0


def velocity_closed_form(config: SystemConfig, d0: complex) -> float:
    d2 = abs(d0) ** 2
    return float(sum(d2 * s.g**2 * s.bias / (2 * d2 * s.g**2 + s.lam**2 + (s.omega - config.tilt) ** 2)
                     for s in config.spins))


def velocity_separable(config: SystemConfig, d0: complex) -> SeparableVelocity:
    """Asymptotic <X> velocity under the product ansatz, sum_j i g_j |d0| <s~+_j> + c.c."""
    d0_mag = abs(d0)
    total = 0.0
    for s in config.spins:
        if s.lam <= 0:
            raise ValueError("separable velocity requires positive bath rates")
        ss = steady_state_spin(s, config.tilt, d0_mag)
        total += -2.0 * s.g * d0_mag * float(np.imag(ss.s_plus[0]))
    return SeparableVelocity(total, velocity_closed_form(config, d0))


@dataclass
class LabTrajectory:
    t: np.ndarray
    s_minus: np.ndarray   # (n_t, n_spins), lab frame
    s_z: np.ndarray       # (n_t, n_spins)
    d0: complex
    tilt: float

    def drive(self) -> np.ndarray:
        return self.d0 * np.exp(-1j * self.tilt * self.t)

    def velocity(self, spins) -> np.ndarray:
        """Instantaneous -2 sum_j g_j Im(<d><s+_j>) under the product ansatz."""
        dr = self.drive()[:, None]
        g = np.array([s.g for s in spins])[None, :]
        return (-2.0 * g * np.imag(dr * np.conj(self.s_minus))).sum(axis=1)


def _lab_rhs(t, sm, sz, spins, d0, tilt):
    drv = d0 * np.exp(-1j * tilt * t)
    omega = np.array([s.omega for s in spins])
    lam = np.array([s.lam for s in spins])
    g = np.array([s.g for s in spins])
    bias = np.array([s.bias for s in spins])
    dsm = (-1j * omega - lam) * sm + 1j * g * drv * sz
    dsz = (-2j * g * drv * np.conj(sm) + 2j * g * np.conj(drv) * sm).real - 2.0 * lam * sz + bias
    return dsm, dsz


def integrate_lab(config: SystemConfig, d0: complex, t_final: float, steps_per_period: int = 400,
                  sm0=None, sz0=None, t0: float = 0.0) -> LabTrajectory:
    """RK4 in the lab frame; starts from the bare steady state unless given."""
    spins = config.spins
    period = 2.0 * math.pi / abs(config.tilt)
    h = period / steps_per_period
    n = max(1, round((t_final - t0) / h))
    sm = np.zeros(len(spins), dtype=complex) if sm0 is None else np.array(sm0, dtype=complex)
    sz = np.array([s.sz_bare for s in spins]) if sz0 is None else np.array(sz0, dtype=float)
    ts = t0 + h * np.arange(n + 1)
    out_m = np.empty((n + 1, len(spins)), dtype=complex)
    out_z = np.empty((n + 1, len(spins)))
    out_m[0], out_z[0] = sm, sz
    for k in range(n):
        t = ts[k]
        a1, b1 = _lab_rhs(t, sm, sz, spins, d0, config.tilt)
        a2, b2 = _lab_rhs(t + h / 2, sm + h / 2 * a1, sz + h / 2 * b1, spins, d0, config.tilt)
        a3, b3 = _lab_rhs(t + h / 2, sm + h / 2 * a2, sz + h / 2 * b2, spins, d0, config.tilt)
        a4, b4 = _lab_rhs(t + h, sm + h * a3, sz + h * b3, spins, d0, config.tilt)
        sm = sm + h / 6 * (a1 + 2 * a2 + 2 * a3 + a4)
        sz = sz + h / 6 * (b1 + 2 * b2 + 2 * b3 + b4)
        out_m[k + 1], out_z[k + 1] = sm, sz
    return LabTrajectory(ts, out_m, out_z, d0, config.tilt)


class PeriodicityError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnergyBalance:
    heat: float              # Q: energy drawn from the baths over one drive period
    work: float              # W: energy exchanged with the drive <d(t)>, from its defining integral
    work_from_velocity: float  # T_d * tilt * v_sep, energy deposited in the load
    period: float
    t0: float
    closure: float           # max |x(t0 + T) - x(t0)| over the measured period

    @property
    def balance_error(self) -> float:
        return abs(self.heat + self.work) / abs(self.work) if self.work else abs(self.heat)


def _period_integrals(traj: LabTrajectory, spins) -> tuple[float, float]:
    """Periodic trapezoid sums of the heat and work integrands over one sampled period."""
    t, sm, sz = traj.t[:-1], traj.s_minus[:-1], traj.s_z[:-1]
    drv = (traj.d0 * np.exp(-1j * traj.tilt * t))[:, None]
    ddrv = -1j * traj.tilt * drv
    omega = np.array([s.omega for s in spins])[None, :]
    lam = np.array([s.lam for s in spins])[None, :]
    g = np.array([s.g for s in spins])[None, :]
    bias = np.array([s.bias for s in spins])[None, :]
    sp_ = np.conj(sm)
    # tr[H_s D(rho)] with D^dag(sz) = bias - 2 lam sz and D^dag(s+-) = -lam s+-
    heat_rate = (0.5 * omega * (bias - 2 * lam * sz) - lam * g * 2.0 * np.real(drv * sp_)).sum(axis=1)
    work_rate = (g * 2.0 * np.real(ddrv * sp_)).sum(axis=1)
    h = traj.t[1] - traj.t[0]
    return float(heat_rate.sum() * h), float(work_rate.sum() * h)


def energy_accounting(config: SystemConfig, d0: complex, t0_periods: int = 50,
                      steps_per_period: int = 400, tol: float = 1e-8,
                      max_periods: int = 2000) -> EnergyBalance:
    """Heat and work per drive period on the mean-field limit cycle.

    Integrates from the bare steady state for ``t0_periods`` periods, then
    period by period until two consecutive heat integrals agree to ``tol``.
    """
    period = 2.0 * math.pi / abs(config.tilt)
    traj = integrate_lab(config, d0, t0_periods * period, steps_per_period)
    sm, sz, t = traj.s_minus[-1], traj.s_z[-1], traj.t[-1]
    prev = None
    for _ in range(max_periods):
        seg = integrate_lab(config, d0, t + period, steps_per_period, sm, sz, t0=t)
        heat, work = _period_integrals(seg, config.spins)
        closure = float(max(np.max(np.abs(seg.s_minus[-1] * np.exp(1j * config.tilt * period) - seg.s_minus[0]),
                                   initial=0.0),
                            np.max(np.abs(seg.s_z[-1] - seg.s_z[0]), initial=0.0)))
        if prev is not None and abs(heat - prev) <= tol:
            v = velocity_separable(config, d0).value
            return EnergyBalance(heat, work, period * config.tilt * v, period, t, closure)
        prev = heat
        sm, sz, t = seg.s_minus[-1], seg.s_z[-1], seg.t[-1]
    raise PeriodicityError(f"no periodic orbit within {max_periods} periods (last change {abs(heat - prev):.3e})")
