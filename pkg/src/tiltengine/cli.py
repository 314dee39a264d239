"""Command-line front end: configs, solver dispatch, sweeps, fits and figure reports."""

from __future__ import annotations

import csv
import json
import math
import os
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import click
import numpy as np

from . import analysis, diffusion, meanfield
from .evolve import NumericalAbort, evolve_record, format_float
from .model import (
    Amplitude,
    ConfigError,
    InitialStateSpec,
    ParticleState,
    SpinParams,
    SpinState,
    SystemConfig,
    TimeControls,
    initial_density,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_FIT = 0, 2, 3, 4
UNITS = ("tilt", "absolute")

TOP_KEYS = {"tilt", "n_sites", "spins", "initial", "time", "units"}
SPIN_KEYS = {"omega", "g", "lambda_plus", "lambda_minus"}
INITIAL_KEYS = {"particle", "spins", "entangled"}
PARTICLE_KEYS = {"kind", "n0", "phase", "width", "phase_gradient"}
SPIN_STATE_KEYS = {"kind", "theta", "phi"}
AMPLITUDE_KEYS = {"site", "spins", "amp"}
TIME_KEYS = {"t_final", "dt", "sample_stride"}


# ---------------------------------------------------------------- config I/O

def _line_of(text: str, key: str) -> int | None:
    needle = f'"{key.rsplit(".", 1)[-1].split("[")[0]}"'
    for n, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return n
    return None


def _check_keys(obj, allowed: set, path: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"expected an object, got {type(obj).__name__}", path)
    for k in obj:
        if k not in allowed:
            raise ConfigError(f"unknown key {k!r}", f"{path}.{k}" if path else k)


def _number(obj: dict, key: str, path: str, default=None, required: bool = False):
    if key not in obj or obj[key] is None:
        if required:
            raise ConfigError("missing required key", f"{path}.{key}" if path else key)
        return default
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(f"expected a finite number, got {v!r}", f"{path}.{key}" if path else key)
    return float(v)


def _integer(obj: dict, key: str, path: str, default=None, required: bool = False):
    v = _number(obj, key, path, default, required)
    if v is None:
        return None
    if v != int(v):
        raise ConfigError(f"expected an integer, got {obj[key]!r}", f"{path}.{key}" if path else key)
    return int(v)


def _complex(v, path: str) -> complex:
    if isinstance(v, (list, tuple)) and len(v) == 2 and all(isinstance(c, (int, float)) for c in v):
        return complex(float(v[0]), float(v[1]))
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return complex(float(v))
    raise ConfigError(f"expected a number or [re, im], got {v!r}", path)


def _relabel(err: ConfigError, prefix: str) -> ConfigError:
    key = err.key
    if key and not key.startswith(prefix):
        key = f"{prefix}.{key}"
    return ConfigError(err.message, key or prefix)


def config_from_dict(data) -> SystemConfig:
    _check_keys(data, TOP_KEYS, "")
    spins = []
    raw_spins = data.get("spins", [])
    if not isinstance(raw_spins, list):
        raise ConfigError("expected a list", "spins")
    for j, s in enumerate(raw_spins):
        path = f"spins[{j}]"
        _check_keys(s, SPIN_KEYS, path)
        vals = {k: _number(s, k, path, required=True) for k in ("omega", "g", "lambda_plus", "lambda_minus")}
        try:
            spins.append(SpinParams(**vals))
        except ConfigError as e:
            raise _relabel(e, path) from None

    init = data.get("initial", {}) or {}
    _check_keys(init, INITIAL_KEYS, "initial")
    part = init.get("particle", {}) or {}
    _check_keys(part, PARTICLE_KEYS, "initial.particle")
    kind = part.get("kind", "localized")
    if not isinstance(kind, str):
        raise ConfigError(f"expected a string, got {kind!r}", "initial.particle.kind")
    try:
        particle = ParticleState(
            kind=kind,
            n0=_integer(part, "n0", "initial.particle", 0),
            phase=_number(part, "phase", "initial.particle", 0.0),
            width=_number(part, "width", "initial.particle", 1.0),
            phase_gradient=_number(part, "phase_gradient", "initial.particle", 0.0),
        )
    except ConfigError as e:
        raise _relabel(e, "initial.particle") from None
    spin_states = []
    raw_states = init.get("spins", []) or []
    if not isinstance(raw_states, list):
        raise ConfigError("expected a list", "initial.spins")
    for j, st in enumerate(raw_states):
        path = f"initial.spins[{j}]"
        if isinstance(st, str):
            st = {"kind": st}
        _check_keys(st, SPIN_STATE_KEYS, path)
        try:
            spin_states.append(SpinState(st.get("kind", "bare_steady"), _number(st, "theta", path, 0.0),
                                         _number(st, "phi", path, 0.0)))
        except ConfigError as e:
            raise ConfigError(e.message, f"{path}.kind") from None
    entangled = init.get("entangled")
    if entangled is not None:
        if not isinstance(entangled, list) or not entangled:
            raise ConfigError("expected a non-empty list", "initial.entangled")
        amps = []
        for k, a in enumerate(entangled):
            path = f"initial.entangled[{k}]"
            _check_keys(a, AMPLITUDE_KEYS, path)
            spins_str = a.get("spins", "")
            if not isinstance(spins_str, str) or len(spins_str) != len(spins) or set(spins_str) - {"u", "d"}:
                raise ConfigError(f"expected a string of {len(spins)} 'u'/'d' letters", f"{path}.spins")
            amps.append(Amplitude(_integer(a, "site", path, required=True), spins_str,
                                  _complex(a.get("amp", 1.0), f"{path}.amp")))
        entangled = tuple(amps)

    tm = data.get("time", {}) or {}
    _check_keys(tm, TIME_KEYS, "time")
    try:
        time = TimeControls(_number(tm, "t_final", "time", 100.0), _number(tm, "dt", "time", None),
                            _integer(tm, "sample_stride", "time", 10))
    except ConfigError as e:
        raise _relabel(e, "time") from None
    units = data.get("units", "tilt")
    if units not in UNITS:
        raise ConfigError(f"expected one of {UNITS}, got {units!r}", "units")
    cfg = SystemConfig(
        tilt=_number(data, "tilt", "", required=True),
        n_sites=_integer(data, "n_sites", "", required=True),
        spins=tuple(spins),
        initial=InitialStateSpec(particle, tuple(spin_states), entangled),
        time=time,
        units=units,
    )
    labels = cfg.layout.site_labels()
    if not labels[0] <= particle.n0 <= labels[-1] - (1 if kind == "two_site" else 0):
        raise ConfigError(f"site {particle.n0} outside the lattice [{labels[0]}, {labels[-1]}]", "initial.particle.n0")
    if entangled is not None:
        for k, a in enumerate(entangled):
            if not labels[0] <= a.site <= labels[-1]:
                raise ConfigError(f"site {a.site} outside the lattice", f"initial.entangled[{k}].site")
    return cfg


def config_to_dict(cfg: SystemConfig) -> dict:
    p = cfg.initial.particle
    init = {
        "particle": {"kind": p.kind, "n0": p.n0, "phase": p.phase, "width": p.width, "phase_gradient": p.phase_gradient},
        "spins": [{"kind": s.kind, "theta": s.theta, "phi": s.phi} for s in cfg.initial.spins],
        "entangled": None if cfg.initial.entangled is None else [
            {"site": a.site, "spins": a.spins, "amp": [complex(a.amp).real, complex(a.amp).imag]}
            for a in cfg.initial.entangled],
    }
    return {
        "tilt": cfg.tilt,
        "n_sites": cfg.n_sites,
        "spins": [{"omega": s.omega, "g": s.g, "lambda_plus": s.lambda_plus, "lambda_minus": s.lambda_minus}
                  for s in cfg.spins],
        "initial": init,
        "time": {"t_final": cfg.time.t_final, "dt": cfg.time.dt, "sample_stride": cfg.time.sample_stride},
        "units": cfg.units,
    }


def serialize_config(cfg: SystemConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2) + "\n"


def parse_config_text(text: str) -> SystemConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from None
    try:
        cfg = config_from_dict(data)
        initial_density(cfg)
        return cfg
    except ConfigError as e:
        line = _line_of(text, e.key) if e.key else None
        if line is not None:
            raise ConfigError(f"line {line}: {e.message}", e.key) from None
        raise


def parse_config(path) -> SystemConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such file {path}", "config")
    return parse_config_text(path.read_text())


# ---------------------------------------------------------------- output dirs

class AtomicDir:
    """Write into a sibling temporary directory and move it into place on success."""

    def __init__(self, target):
        self.target = Path(target)

    def __enter__(self) -> Path:
        self.target.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.target.name}.", dir=self.target.parent))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if self.target.exists():
            for item in self.tmp.iterdir():
                dest = self.target / item.name
                if dest.is_dir():
                    shutil.rmtree(dest)
                os.replace(item, dest)
            self.tmp.rmdir()
        else:
            os.replace(self.tmp, self.target)
        return False


# ---------------------------------------------------------------- solvers

def write_meanfield(cfg: SystemConfig, path: Path) -> Path:
    """Mean-field trajectory in the exact-series column layout; unavailable columns are left empty."""
    d0 = complex(np.trace(initial_density(cfg).matrix @ _d_matrix(cfg)))
    head = ["t", "mean_x", "var_x", "re_d", "im_d", "s_total", "s_particle", "leakage"]
    for j in range(1, cfg.n_spins + 1):
        head += [f"sx_{j}", f"sy_{j}", f"sz_{j}"]
    if cfg.n_spins == 0:
        traj_t = np.arange(0.0, cfg.time.t_final + 1e-12, cfg.dt * cfg.time.sample_stride)
        rows = [[t, 0.0, None, (d0 * np.exp(-1j * cfg.tilt * t)).real, (d0 * np.exp(-1j * cfg.tilt * t)).imag,
                 None, None, None] for t in traj_t]
    else:
        steps = max(20, int(round(2 * math.pi / abs(cfg.tilt) / cfg.dt))) if cfg.tilt else 200
        traj = meanfield.integrate_lab(cfg, d0, cfg.time.t_final, steps) if cfg.tilt else None
        if traj is None:
            raise ConfigError("mean-field trajectories need a non-zero tilt", "tilt")
        v = traj.velocity(cfg.spins)
        x0 = float(cfg.layout.site_labels() @ np.real(np.diag(initial_density(cfg).matrix))
                   .reshape(cfg.n_sites, -1).sum(axis=1))
        h = traj.t[1] - traj.t[0]
        mean_x = x0 + np.concatenate([[0.0], np.cumsum(0.5 * h * (v[1:] + v[:-1]))])
        drv = traj.drive()
        rows = []
        for k in range(0, traj.t.size, max(1, cfg.time.sample_stride)):
            row = [traj.t[k], mean_x[k], None, drv[k].real, drv[k].imag, None, None, None]
            for j in range(cfg.n_spins):
                sm = traj.s_minus[k, j]
                row += [2 * sm.real, -2 * sm.imag, traj.s_z[k, j]]
            rows.append(row)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(head)
        for row in rows:
            w.writerow([format_float(x) for x in row])
    return path


def _d_matrix(cfg: SystemConfig) -> np.ndarray:
    from .model import build_lattice_ops
    return build_lattice_ops(cfg.layout)["d"].dense()


def simulate(cfg: SystemConfig, method: str, out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(serialize_config(cfg))
    if method == "exact":
        series = evolve_record(cfg)
        paths = [series.to_csv(out_dir / "timeseries.csv")]
        if series.truncated:
            click.echo(f"warning: run truncated at t = {series.trip_time} (leakage guard)", err=True)
        if len(series) >= analysis.MIN_WINDOW_SAMPLES and cfg.n_spins:
            try:
                v = analysis.series_velocity(series)
                click.echo(f"velocity {v.velocity:.10g} +- {v.stderr:.3g}")
            except ValueError as e:
                click.echo(f"velocity not estimated: {e}", err=True)
        return paths
    if method == "meanfield":
        return [write_meanfield(cfg, out_dir / "timeseries.csv")]
    if method == "diffusion":
        traj = diffusion.diffusion_evolve(cfg, cfg.time.t_final, n0=cfg.initial.particle.n0)
        return [traj.to_csv(out_dir / "moments.csv")]
    raise ConfigError(f"unknown method {method!r}", "method")


# ---------------------------------------------------------------- sweeps

@dataclass(frozen=True)
class SweepPoint:
    value: float
    detuning: float
    velocity: float
    stderr: float
    status: str
    leakage: float


def parse_param(name: str, n_spins: int) -> tuple[str, int]:
    """'tilt', 'g', 'g_2', 'lambda_plus', 'lambda_plus_3' -> (field, 0-based spin index)."""
    if name == "tilt":
        return "tilt", -1
    for base in ("lambda_plus", "g"):
        if name == base:
            j = 0
        elif name.startswith(base + "_") and name[len(base) + 1:].isdigit():
            j = int(name[len(base) + 1:]) - 1
        else:
            continue
        if not 0 <= j < n_spins:
            raise ConfigError(f"spin index {j + 1} out of range for {n_spins} spins", "param")
        return base, j
    raise ConfigError(f"unknown sweep parameter {name!r}", "param")


def point_config(cfg: SystemConfig, field: str, j: int, value: float) -> SystemConfig:
    if field == "tilt":
        return cfg.replace(tilt=value)
    if field == "g":
        return cfg.with_spin(j, g=value)
    lam = cfg.spins[j].lam  # mean rate held fixed
    return cfg.with_spin(j, lambda_plus=value, lambda_minus=2.0 * lam - value)


def _run_point(args) -> SweepPoint:
    cfg, field, j, value, method = args
    try:
        pc = point_config(cfg, field, j, value)
    except ConfigError as e:
        return SweepPoint(value, math.nan, math.nan, math.nan, f"config error: {e}", math.nan)
    detuning = (pc.spins[0].omega - pc.tilt) if pc.spins else math.nan
    try:
        if method == "meanfield":
            d0 = complex(np.trace(initial_density(pc).matrix @ _d_matrix(pc)))
            v = meanfield.velocity_separable(pc, d0).value if pc.spins else 0.0
            return SweepPoint(value, detuning, v, 0.0, "ok", 0.0)
        if method == "diffusion":
            return SweepPoint(value, detuning, diffusion.hop_rates(pc).drift, 0.0, "ok", 0.0)
        series = evolve_record(pc, entropies=False)
        leak = float(series.column("leakage").max()) if len(series) else math.nan
        est = analysis.series_velocity(series)
        return SweepPoint(value, detuning, est.velocity, est.stderr, "truncated" if series.truncated else "ok", leak)
    except (NumericalAbort, ValueError, np.linalg.LinAlgError) as e:
        return SweepPoint(value, detuning, math.nan, math.nan, f"failed: {e}", math.nan)


def run_sweep(cfg: SystemConfig, param: str, values, method: str = "exact", workers: int | None = None) -> list[SweepPoint]:
    field, j = parse_param(param, cfg.n_spins)
    tasks = [(cfg, field, j, float(v), method) for v in sorted(values)]
    workers = workers or os.cpu_count() or 1
    if workers <= 1 or len(tasks) <= 1:
        return [_run_point(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
        return list(pool.map(_run_point, tasks))


def write_sweep(points, param: str, path: Path) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([param, "detuning", "velocity", "stderr", "leakage", "status"])
        for p in points:
            w.writerow([format_float(p.value), format_float(p.detuning), format_float(p.velocity),
                        format_float(p.stderr), format_float(p.leakage), p.status])
    return path


def read_columns(path) -> dict[str, np.ndarray]:
    with Path(path).open() as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError("empty CSV", "in")
    head, body = rows[0], rows[1:]
    out = {}
    for k, name in enumerate(head):
        col = []
        for r in body:
            try:
                col.append(float(r[k]) if r[k] != "" else math.nan)
            except (ValueError, IndexError):
                col.append(math.nan)
        out[name] = np.array(col)
    return out


# ---------------------------------------------------------------- click

class ConfigPath(click.ParamType):
    name = "config"

    def convert(self, value, param, ctx):
        try:
            return parse_config(value)
        except ConfigError as e:
            click.echo(f"config error: {e}", err=True)
            ctx.exit(EXIT_CONFIG)


@click.group()
def main():
    """Tilted-lattice heat engine simulator."""


@main.command("simulate")
@click.option("--config", "cfg", type=ConfigPath(), required=True)
@click.option("--method", type=click.Choice(["exact", "meanfield", "diffusion"]), default="exact")
@click.option("--out", "out", type=click.Path(file_okay=False), required=True)
def simulate_cmd(cfg, method, out):
    """Run one solver and write its CSV output."""
    try:
        with AtomicDir(out) as tmp:
            simulate(cfg, method, tmp)
    except NumericalAbort as e:
        click.echo(f"numerical abort: {e}", err=True)
        sys.exit(EXIT_NUMERICAL)
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_CONFIG)


@main.command("sweep")
@click.option("--config", "cfg", type=ConfigPath(), required=True)
@click.option("--param", required=True, help="tilt, g[_j] or lambda_plus[_j] (spin index 1-based)")
@click.option("--from", "start", type=float, required=True)
@click.option("--to", "stop", type=float, required=True)
@click.option("--points", type=click.IntRange(min=1), required=True)
@click.option("--method", type=click.Choice(["exact", "meanfield", "diffusion"]), default="exact")
@click.option("--workers", type=click.IntRange(min=1), default=None)
@click.option("--out", "out", type=click.Path(file_okay=False), required=True)
def sweep_cmd(cfg, param, start, stop, points, method, workers, out):
    """Velocity against one parameter; failed points are flagged rows."""
    try:
        pts = run_sweep(cfg, param, np.linspace(start, stop, points), method, workers)
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    with AtomicDir(out) as tmp:
        (tmp / "config.json").write_text(serialize_config(cfg))
        write_sweep(pts, param, tmp / "sweep.csv")
    bad = [p for p in pts if p.status != "ok"]
    if bad:
        click.echo(f"{len(bad)} of {len(pts)} points flagged", err=True)


@main.group("fit")
def fit_group():
    """Fits on CSV outputs."""


@fit_group.command("lorentzian")
@click.option("--in", "path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--peaks", type=click.IntRange(min=1), required=True)
@click.option("--x", "xcol", default=None, help="abscissa column (default: first column)")
@click.option("--out", "out", type=click.Path(dir_okay=False), default=None)
def fit_lorentzian_cmd(path, peaks, xcol, out):
    """Sum-of-Lorentzians fit of velocity vs the first (or --x) column."""
    cols = read_columns(path)
    xcol = xcol or next(iter(cols))
    if xcol not in cols or "velocity" not in cols:
        click.echo(f"missing column {xcol!r} or 'velocity'", err=True)
        sys.exit(EXIT_CONFIG)
    x, y = cols[xcol], cols["velocity"]
    ok = np.isfinite(x) & np.isfinite(y)
    try:
        fit = analysis.fit_lorentzian_sum(x[ok], y[ok], peaks)
    except ValueError as e:
        click.echo(f"fit error: {e}", err=True)
        sys.exit(EXIT_FIT)
    target = Path(out) if out else Path(path).with_name(Path(path).stem + "_lorentzian.csv")
    fit.to_csv(target)
    for k, p in enumerate(fit.peaks, 1):
        click.echo(f"peak {k}: center {p.center:.8g} width {p.width:.6g} amplitude {p.amplitude:.6g}")
    click.echo(f"residual norm {fit.residual_norm:.3e}")
    for m in fit.messages:
        click.echo(m, err=True)
    if not fit.converged:
        sys.exit(EXIT_FIT)


@fit_group.command("entropy")
@click.option("--in", "path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out", type=click.Path(dir_okay=False), default=None)
def fit_entropy_cmd(path, out):
    """Fit S_t and S_p to a + ln(t)/2 and to a free slope over the last decade."""
    cols = read_columns(path)
    rows = []
    for name in ("s_total", "s_particle", "entropy"):
        if name not in cols:
            continue
        try:
            f = analysis.fit_entropy_log(cols["t"], cols[name])
        except ValueError as e:
            click.echo(f"fit error: {e}", err=True)
            sys.exit(EXIT_FIT)
        rows += [(f"{name}_offset", f.offset, math.nan), (f"{name}_slope", f.slope, f.slope_stderr),
                 (f"{name}_residual", f.residual, math.nan)]
        click.echo(f"{name}: a = {f.offset:.6g}, free slope {f.slope:.4f} +- {f.slope_stderr:.2g}")
    if not rows:
        click.echo("no entropy columns found", err=True)
        sys.exit(EXIT_CONFIG)
    target = Path(out) if out else Path(path).with_name(Path(path).stem + "_entropy_fit.csv")
    with target.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["param", "value", "stderr"])
        for r in rows:
            w.writerow([r[0], format_float(r[1]), format_float(r[2])])


@main.command("limit-cycle")
@click.option("--config", "cfg", type=ConfigPath(), required=True)
def limit_cycle_cmd(cfg):
    """Run the exact solver and report the asymptotic Bloch-vector orbit."""
    if cfg.n_spins == 0 or cfg.tilt == 0:
        click.echo("limit-cycle detection needs at least one spin and a non-zero tilt", err=True)
        sys.exit(EXIT_CONFIG)
    try:
        series = evolve_record(cfg, entropies=False)
        rep = analysis.detect_limit_cycle(series.t, np.stack([series.bloch(j) for j in range(cfg.n_spins)]), cfg.tilt)
    except NumericalAbort as e:
        click.echo(f"numerical abort: {e}", err=True)
        sys.exit(EXIT_NUMERICAL)
    except ValueError as e:
        click.echo(f"limit-cycle error: {e}", err=True)
        sys.exit(EXIT_NUMERICAL)
    click.echo(f"cycle: {'yes' if rep.has_cycle else 'no'}")
    click.echo(f"period {rep.period:.8g} (expected {rep.period_expected:.8g})")
    click.echo("amplitude " + " ".join(f"{a:.6g}" for a in rep.amplitude))
    click.echo(f"max deviation over one period {rep.max_deviation:.3e}; sz drift {rep.sz_drift:.3e}")


@main.command("report")
@click.option("--name", type=click.Choice(["fig2a", "fig2b", "fig2c", "fig2d", "fig2e", "fig2f", "fig3", "fig4"]),
              required=True)
@click.option("--out", "out", type=click.Path(file_okay=False), required=True)
def report_cmd(name, out):
    """Reproduce one figure: CSVs plus a pass/fail summary."""
    from .experiments import run_report

    try:
        with AtomicDir(out) as tmp:
            res = run_report(name, tmp)
    except NumericalAbort as e:
        click.echo(f"numerical abort: {e}", err=True)
        sys.exit(EXIT_NUMERICAL)
    click.echo(res.summary(), nl=False)


if __name__ == "__main__":
    main()
