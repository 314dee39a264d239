"""Classical biased random walk from adiabatic elimination of the spins.

To second order in g the site populations hop up at rate
g^2 lambda_plus / (lam^2 + (omega - tilt)^2) and down at
g^2 lambda_minus / (...), summed over spins. The drift is then
sum up - down and the diffusion constant is D = sum (up + down) / 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special

from .model import SystemConfig

GROW_THRESHOLD = 1e-15
EULER_STABILITY = 0.5
KERNEL_TAIL = 1e-30


class StabilityError(ValueError):
    pass


@dataclass(frozen=True)
class HopRates:
    up: np.ndarray
    down: np.ndarray

    @property
    def total_up(self) -> float:
        return float(np.sum(self.up))

    @property
    def total_down(self) -> float:
        return float(np.sum(self.down))

    @property
    def drift(self) -> float:
        return self.total_up - self.total_down

    @property
    def diffusion(self) -> float:
        return 0.5 * (self.total_up + self.total_down)


def hop_rates(config: SystemConfig) -> HopRates:
    up, down = [], []
    for s in config.spins:
        lorentz = s.g**2 / (s.lam**2 + (s.omega - config.tilt) ** 2)
        up.append(lorentz * s.lambda_plus)
        down.append(lorentz * s.lambda_minus)
    return HopRates(np.array(up), np.array(down))


@dataclass
class SiteDistribution:
    """Populations p[k] on site labels offset + k."""

    p: np.ndarray
    offset: int = 0

    @classmethod
    def delta(cls, site: int = 0, pad: int = 4) -> "SiteDistribution":
        p = np.zeros(2 * pad + 1)
        p[pad] = 1.0
        return cls(p, site - pad)

    @property
    def labels(self) -> np.ndarray:
        return self.offset + np.arange(self.p.size)

    def mean(self) -> float:
        return float(self.labels @ self.p)

    def var(self) -> float:
        m = self.mean()
        return float(((self.labels - m) ** 2) @ self.p)

    def entropy(self) -> float:
        q = self.p[self.p > 0]
        return float(-(q @ np.log(q)))

    def padded(self, pad: int) -> "SiteDistribution":
        return SiteDistribution(np.pad(self.p, pad), self.offset - pad)

    def ensure_margin(self, margin: int = 1) -> "SiteDistribution":
        """Grow the array so the outer ``margin`` sites on each side stay numerically empty."""
        lo = self.p[:margin].max(initial=0.0) > GROW_THRESHOLD
        hi = self.p[-margin:].max(initial=0.0) > GROW_THRESHOLD
        if not (lo or hi):
            return self
        pad = max(8, self.p.size // 2)
        left = pad if lo else 0
        right = pad if hi else 0
        return SiteDistribution(np.pad(self.p, (left, right)), self.offset - left)


def diffusion_step(dist: SiteDistribution, rates: HopRates, dt: float) -> SiteDistribution:
    """One forward-Euler step of the hopping master equation."""
    u, d = rates.total_up, rates.total_down
    if dt * (u + d) >= EULER_STABILITY:
        raise StabilityError(f"dt*(up+down)={dt * (u + d):.3g} exceeds {EULER_STABILITY}")
    dist = dist.ensure_margin(1)
    p = dist.p
    new = p * (1.0 - dt * (u + d))
    new[1:] += dt * u * p[:-1]
    new[:-1] += dt * d * p[1:]
    return SiteDistribution(new, dist.offset)


def step_kernel(rates: HopRates, dt: float) -> tuple[np.ndarray, int]:
    """Exact one-interval transition kernel, a Skellam distribution; returns (weights, min shift)."""
    mu_u, mu_d = rates.total_up * dt, rates.total_down * dt
    mean = mu_u - mu_d
    spread = math.sqrt(mu_u + mu_d)
    half = int(math.ceil(abs(mean) + 14.0 * spread + 40.0))
    m = np.arange(-half, half + 1)
    if mu_u > 0 and mu_d > 0:
        z = 2.0 * math.sqrt(mu_u * mu_d)
        logw = 0.5 * m * math.log(mu_u / mu_d) - (math.sqrt(mu_u) - math.sqrt(mu_d)) ** 2
        w = np.exp(logw) * special.ive(np.abs(m), z)
    else:
        mu = mu_u if mu_u > 0 else mu_d
        k = m if mu_u > 0 else -m
        w = np.zeros(m.size)
        ok = k >= 0
        if mu > 0:
            w[ok] = np.exp(k[ok] * math.log(mu) - mu - special.gammaln(k[ok] + 1.0))
        else:
            w[m == 0] = 1.0
    w[w < KERNEL_TAIL] = 0.0
    return w, -half


@dataclass
class DiffusionTrajectory:
    t: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    entropy: np.ndarray
    rates: HopRates
    final: SiteDistribution
    snapshots: dict = field(default_factory=dict)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w") as fh:
            fh.write("t,mean_x,var_x,entropy\n")
            for row in zip(self.t, self.mean, self.var, self.entropy):
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
        return path


def diffusion_evolve(config: SystemConfig, t_final: float, dt: float | None = None,
                     scheme: str = "kernel", n0: int = 0, sample_every: int = 1,
                     keep: tuple = ()) -> DiffusionTrajectory:
    """Evolve a delta at ``n0``.

    ``scheme="kernel"`` applies the exact Skellam propagator over each interval,
    so moments follow v t and 2 D t up to round-off. ``scheme="euler"`` uses
    :func:`diffusion_step`, whose variance carries an O(dt) defect.
    """
    rates = hop_rates(config)
    total = rates.total_up + rates.total_down
    if dt is None:
        dt = (0.1 / total if scheme == "euler" else t_final / 200.0) if total > 0 else t_final
    n = max(1, int(round(t_final / dt)))
    dt = t_final / n
    dist = SiteDistribution.delta(n0)
    if scheme == "kernel":
        kernel, shift = step_kernel(rates, dt)
    elif scheme != "euler":
        raise ValueError(f"unknown scheme {scheme!r}")
    ts, means, vars_, ents, snaps = [0.0], [dist.mean()], [dist.var()], [dist.entropy()], {}
    for k in range(1, n + 1):
        if scheme == "euler":
            dist = diffusion_step(dist, rates, dt)
        else:
            p = np.convolve(dist.p, kernel)
            dist = SiteDistribution(p, dist.offset + shift)
            nz = np.nonzero(dist.p)[0]
            dist = SiteDistribution(dist.p[nz[0]:nz[-1] + 1].copy(), dist.offset + int(nz[0]))
        if k % sample_every == 0 or k == n:
            t = k * dt
            ts.append(t)
            means.append(dist.mean())
            vars_.append(dist.var())
            ents.append(dist.entropy())
            for tk in keep:
                if tk not in snaps and t >= tk - 1e-12:
                    snaps[tk] = dist
    return DiffusionTrajectory(np.array(ts), np.array(means), np.array(vars_), np.array(ents),
                               rates, dist, snaps)


def continuum_entropy(diffusion: float, t) -> np.ndarray:
    """Entropy 0.5 * (1 + ln(4 pi D t)) of a Gaussian of variance 2 D t."""
    return 0.5 * (1.0 + np.log(4.0 * math.pi * diffusion * np.asarray(t, dtype=float)))
