"""Post-processing: velocities, Lorentzian lineshapes, entropy laws, limit cycles."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

VELOCITY_FLOOR_PERIODS = 10  # window starts no earlier than 10 drive periods, 20 pi / tilt
MIN_WINDOW_SAMPLES = 10
NO_CYCLE_FLOOR = 1e-8


class FitError(RuntimeError):
    pass


# ---------------------------------------------------------------- velocity

@dataclass(frozen=True)
class VelocityEstimate:
    velocity: float
    stderr: float
    intercept: float
    window: tuple[float, float]
    n_samples: int

    @property
    def relative_stderr(self) -> float:
        return self.stderr / abs(self.velocity) if self.velocity else math.inf


def ols_line(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float, float]:
    """Slope, intercept, slope standard error and R^2 of an ordinary least-squares line."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    n = x.size
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    resid = y - (intercept + slope * x)
    ss_res = float(resid @ resid)
    ss_tot = float(np.sum((y - ym) ** 2))
    stderr = math.sqrt(ss_res / (n - 2) / sxx) if n > 2 else math.inf
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return slope, intercept, stderr, r2


def default_window(t: np.ndarray, tilt: float | None) -> tuple[float, float]:
    t_end = float(t[-1])
    start = float(t[0]) + 0.5 * (t_end - float(t[0]))
    if tilt:
        start = max(start, VELOCITY_FLOOR_PERIODS * 2.0 * math.pi / abs(tilt))
    return start, t_end


def extract_velocity(t, mean_x, window: tuple[float, float] | None = None,
                     tilt: float | None = None) -> VelocityEstimate:
    """OLS slope of <X>(t) over ``window``.

    The default window is the last half of the run, starting no earlier than
    20 pi / ``tilt`` when a frequency is given.
    """
    t, mean_x = np.asarray(t, float), np.asarray(mean_x, float)
    if window is None:
        window = default_window(t, tilt)
    lo, hi = window
    if lo >= hi:
        raise ValueError(f"empty window {window}")
    sel = (t >= lo - 1e-12) & (t <= hi + 1e-12)
    if sel.sum() < MIN_WINDOW_SAMPLES:
        raise ValueError(f"window {window} holds {int(sel.sum())} samples; need {MIN_WINDOW_SAMPLES}")
    slope, icpt, err, _ = ols_line(t[sel], mean_x[sel])
    return VelocityEstimate(slope, err, icpt, (lo, hi), int(sel.sum()))


def reference_frequency(config) -> float:
    """Largest of |tilt| and the spin frequencies; sets the window floor of a run."""
    return max([abs(config.tilt)] + [abs(s.omega) for s in config.spins])


def series_velocity(series, window=None) -> VelocityEstimate:
    return extract_velocity(series.t, series.column("mean_x"), window, reference_frequency(series.config))


# ---------------------------------------------------------------- lorentzians

def lorentzian_sum(x, centers, widths, amps) -> np.ndarray:
    x = np.asarray(x, float)[:, None]
    c, w, a = (np.asarray(v, float)[None, :] for v in (centers, widths, amps))
    return np.sum(a * w**2 / ((x - c) ** 2 + w**2), axis=1)


@dataclass(frozen=True)
class Peak:
    center: float
    width: float
    amplitude: float
    stderr: tuple[float, float, float] = (math.nan, math.nan, math.nan)


@dataclass
class LorentzianFit:
    peaks: list[Peak]
    residual_norm: float
    rms_residual: float
    converged: bool
    iterations: int
    degenerate: bool = False
    messages: list[str] = field(default_factory=list)

    def model(self, x) -> np.ndarray:
        return lorentzian_sum(x, [p.center for p in self.peaks], [p.width for p in self.peaks],
                              [p.amplitude for p in self.peaks])

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w") as fh:
            fh.write("param,value,stderr\n")
            for k, p in enumerate(self.peaks, 1):
                for name, val, err in zip(("center", "width", "amplitude"),
                                          (p.center, p.width, p.amplitude), p.stderr):
                    fh.write(f"{name}_{k},{val:.17g},{err:.17g}\n")
            fh.write(f"residual_norm,{self.residual_norm:.17g},nan\n")
            fh.write(f"converged,{int(self.converged)},nan\n")
        return path


def _initial_peaks(x, y, n_peaks):
    interior = [i for i in range(1, len(y) - 1) if y[i] > y[i - 1] and y[i] >= y[i + 1]]
    if len(y) > 1 and y[0] > y[1]:
        interior.append(0)
    if len(y) > 1 and y[-1] > y[-2]:
        interior.append(len(y) - 1)
    picks = sorted(interior, key=lambda i: -y[i])[:n_peaks]
    # pad with evenly spaced grid points when there are too few maxima
    for i in np.linspace(0, len(x) - 1, n_peaks + 2)[1:-1].astype(int):
        if len(picks) >= n_peaks:
            break
        if i not in picks:
            picks.append(int(i))
    step = float(np.min(np.diff(np.sort(x)))) if len(x) > 1 else 1.0
    params = []
    for i in sorted(picks, key=lambda i: x[i]):
        half = 0.5 * y[i]
        lo = i
        while lo > 0 and y[lo] > half:
            lo -= 1
        hi = i
        while hi < len(y) - 1 and y[hi] > half:
            hi += 1
        width = max(0.5 * (x[hi] - x[lo]), step)
        params += [x[i], math.log(width), y[i]]
    return np.array(params, float)


def _residual_and_jacobian(theta, x, y):
    c, lw, a = theta[0::3], theta[1::3], theta[2::3]
    w = np.exp(lw)
    dx = x[:, None] - c[None, :]
    den = dx**2 + w[None, :] ** 2
    shape = w[None, :] ** 2 / den
    r = np.sum(a[None, :] * shape, axis=1) - y
    jac = np.empty((x.size, theta.size))
    jac[:, 0::3] = a * 2.0 * dx * shape / den
    jac[:, 1::3] = a * 2.0 * shape * (1.0 - shape)
    jac[:, 2::3] = shape
    return r, jac


def fit_lorentzian_sum(x, y, n_peaks: int, max_iter: int = 500, rtol: float = 1e-10,
                       init=None) -> LorentzianFit:
    """Levenberg-Marquardt fit of a sum of Lorentzians a w^2 / ((x - c)^2 + w^2).

    Widths are fitted through their logarithm so they stay positive. Stops when
    an accepted step changes the cost by less than ``rtol`` relative, or after
    ``max_iter`` iterations, which is reported as non-convergence.
    """
    x, y = np.asarray(x, float), np.asarray(y, float)
    if n_peaks < 1:
        raise ValueError("n_peaks must be >= 1")
    if x.size < 3 * n_peaks:
        raise ValueError(f"{x.size} points cannot determine {n_peaks} peaks")
    theta = _initial_peaks(x, y, n_peaks) if init is None else np.asarray(init, float)
    r, jac = _residual_and_jacobian(theta, x, y)
    cost = 0.5 * float(r @ r)
    scale = float(np.max(np.abs(y))) if np.any(y) else 1.0
    floor = 0.5 * x.size * (1e-15 * scale) ** 2
    mu, converged, it = 1e-3, False, 0
    for it in range(1, max_iter + 1):
        if cost <= floor:
            converged = True
            break
        jtj = jac.T @ jac
        grad = jac.T @ r
        diag = np.diag(jtj).copy()
        diag[diag == 0] = 1.0
        accepted = False
        while mu < 1e16:
            try:
                step = np.linalg.solve(jtj + mu * np.diag(diag), -grad)
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            trial = theta + step
            r_new, jac_new = _residual_and_jacobian(trial, x, y)
            cost_new = 0.5 * float(r_new @ r_new)
            if np.isfinite(cost_new) and cost_new < cost:
                accepted = True
                break
            mu *= 4.0
        if not accepted:
            converged = True  # no descent direction left at working precision
            break
        change = (cost - cost_new) / cost
        theta, r, jac, cost = trial, r_new, jac_new, cost_new
        mu = max(mu / 3.0, 1e-12)
        if change < rtol:
            converged = True
            break
    else:
        converged = False

    dof = max(x.size - theta.size, 1)
    try:
        cov = np.linalg.pinv(jac.T @ jac) * (2.0 * cost / dof)
        err = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    except np.linalg.LinAlgError:
        err = np.full(theta.size, np.nan)
    span = float(np.ptp(x)) if x.size > 1 else 1.0
    peaks, messages, degenerate = [], [], False
    for k in range(n_peaks):
        c, w, a = theta[3 * k], math.exp(theta[3 * k + 1]), theta[3 * k + 2]
        peaks.append(Peak(float(c), w, float(a), (float(err[3 * k]), float(w * err[3 * k + 1]), float(err[3 * k + 2]))))
        if w > 10.0 * span or abs(a) < 1e-12 * scale:
            degenerate = True
            messages.append(f"peak {k + 1} is degenerate (width {w:.3g}, amplitude {a:.3g})")
    if not converged:
        messages.append(f"no convergence after {max_iter} iterations")
    peaks.sort(key=lambda p: p.center)
    rn = math.sqrt(2.0 * cost)
    return LorentzianFit(peaks, rn, rn / math.sqrt(x.size), converged, it, degenerate, messages)


def side_peaks(x, y, fit: LorentzianFit, threshold: float = 0.02) -> list[float]:
    """Positions where the fit residual has a local maximum above ``threshold`` of the tallest peak."""
    resid = np.asarray(y, float) - fit.model(x)
    top = max(abs(p.amplitude) for p in fit.peaks)
    return [float(x[i]) for i in range(1, len(x) - 1)
            if resid[i] > resid[i - 1] and resid[i] >= resid[i + 1] and resid[i] > threshold * top]


# ---------------------------------------------------------------- entropy

@dataclass(frozen=True)
class EntropyFit:
    offset: float          # a in S = a + 0.5 ln t
    residual: float        # rms residual of the fixed-slope fit
    slope: float           # free-slope fit S = b + slope ln t
    intercept: float
    slope_stderr: float
    residual_free: float


def fit_entropy_log(t, s, window: tuple[float, float] | None = None) -> EntropyFit:
    """Fit S(t) to a + 1/2 ln t, and to b + slope ln t, over ``window`` (default: last decade)."""
    t, s = np.asarray(t, float), np.asarray(s, float)
    finite = np.isfinite(s) & (t > 0)
    t, s = t[finite], s[finite]
    if t.size < 3:
        raise ValueError("need at least three positive times with finite entropy")
    if window is None:
        window = (t[-1] / 10.0, t[-1])
    sel = (t >= window[0] - 1e-12) & (t <= window[1] + 1e-12)
    if sel.sum() < 3:
        raise ValueError(f"window {window} holds fewer than three samples")
    lt, ss = np.log(t[sel]), s[sel]
    a = float(np.mean(ss - 0.5 * lt))
    res_fixed = float(np.sqrt(np.mean((ss - a - 0.5 * lt) ** 2)))
    slope, icpt, err, _ = ols_line(lt, ss)
    res_free = float(np.sqrt(np.mean((ss - icpt - slope * lt) ** 2)))
    return EntropyFit(a, res_fixed, slope, icpt, err, res_free)


# ---------------------------------------------------------------- limit cycles

@dataclass
class LimitCycleReport:
    has_cycle: bool
    period: float
    period_expected: float
    amplitude: np.ndarray
    max_deviation: float
    sz_drift: float
    n_crossings: int

    @property
    def period_error(self) -> float:
        return abs(self.period - self.period_expected) / self.period_expected


def _upward_crossings(t, y):
    idx = np.nonzero((y[:-1] < 0) & (y[1:] >= 0))[0]
    frac = -y[idx] / (y[idx + 1] - y[idx])
    return t[idx] + frac * (t[idx + 1] - t[idx])


def detect_limit_cycle(t, bloch, tilt: float, transient: float | None = None,
                       drift_periods: int = 5, floor: float = NO_CYCLE_FLOOR) -> LimitCycleReport:
    """Detect a periodic Bloch-vector orbit.

    ``bloch`` is (n_t, 3) for one spin or (n_spins, n_t, 3). The transient
    defaults to 12 drive periods. The period comes from upward zero crossings
    of the centred <sx> of the first spin; the deviation compares each sample
    with the state one period later.
    """
    t = np.asarray(t, float)
    b = np.asarray(bloch, float)
    if b.ndim == 2:
        b = b[None]
    expected = 2.0 * math.pi / abs(tilt)
    if transient is None:
        transient = 12.0 * expected
    sel = t >= transient
    if sel.sum() < 8:
        raise ValueError("too few samples after the transient")
    ts, bs = t[sel], b[:, sel, :]
    amp = 0.5 * (bs[:, :, 0].max(axis=1) - bs[:, :, 0].min(axis=1))
    late = ts >= ts[-1] - drift_periods * expected
    sz_drift = float(np.max(np.ptp(bs[:, late, 2], axis=1)))
    if amp.max() < floor:
        return LimitCycleReport(False, math.nan, expected, amp, 0.0, sz_drift, 0)
    sx = bs[0, :, 0] - bs[0, :, 0].mean()
    cross = _upward_crossings(ts, sx)
    if cross.size < 3:
        return LimitCycleReport(False, math.nan, expected, amp, math.nan, sz_drift, int(cross.size))
    period, _, _, _ = ols_line(np.arange(cross.size), cross)
    last = ts >= ts[-1] - 2 * period
    t_a = ts[last]
    t_a = t_a[t_a + period <= ts[-1]]
    dev = 0.0
    for j in range(bs.shape[0]):
        for c in range(3):
            shifted = np.interp(t_a + period, ts, bs[j, :, c])
            now = np.interp(t_a, ts, bs[j, :, c])
            dev = max(dev, float(np.max(np.abs(shifted - now), initial=0.0)))
    return LimitCycleReport(True, float(period), expected, amp, dev, sz_drift, int(cross.size))


# ---------------------------------------------------------------- asymptotics

@dataclass(frozen=True)
class AsymptoticCheck:
    velocity: float
    sz: float
    rhs_c1: float
    rhs_c_half: float

    @property
    def best_c(self) -> float:
        return 1.0 if abs(self.velocity - self.rhs_c1) <= abs(self.velocity - self.rhs_c_half) else 0.5

    @property
    def residual(self) -> float:
        return min(abs(self.velocity - self.rhs_c1), abs(self.velocity - self.rhs_c_half))


def check_asymptotic_relation(velocity: float, sz: float, lambda_plus: float, lambda_minus: float) -> AsymptoticCheck:
    """Compare v with (lambda_plus - lambda_minus)/2 - c lam <sz> for c = 1 and c = 1/2."""
    lam = 0.5 * (lambda_plus + lambda_minus)
    half_bias = 0.5 * (lambda_plus - lambda_minus)
    return AsymptoticCheck(velocity, sz, half_bias - lam * sz, half_bias - 0.5 * lam * sz)
