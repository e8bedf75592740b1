"""Experiment orchestration: scenario configs, coupled runs, sweeps and reports.

A run advances the particle system and the Euler solver on one clock. They
do not exchange state: the particles never feel ``u``; ``u`` only enters the
diagnostics (modulated energy, its time-derivative terms, weak-* metrics).
"""
from __future__ import annotations

import csv
import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import euler2d
from . import modulated_energy as me
from . import nbody
from . import spectral_field as sf


class ConfigError(ValueError):
    """Invalid scenario configuration."""


# ---------------------------------------------------------------------------
# configuration

_INITIAL_KEYS = {"mode", "velocity_noise", "jitter"}
_VORTICITY_KEYS = {"preset", "seed", "max_mode"}


@dataclass(frozen=True)
class ScenarioConfig:
    d: int = 2
    N: tuple = (256,)
    theta: tuple = (0.5,)
    T: float = 0.25
    dt: float = 1e-3
    m: int = 128
    initial_data: dict = field(default_factory=lambda: {"mode": "iid_uniform", "velocity_noise": 0.0})
    vorticity: dict = field(default_factory=lambda: {"preset": "taylor_green"})
    sample_stride: int = 25
    epsilon_cap: object = "default"
    seeds: tuple = (0,)
    output_dir: str = "out"
    battery: bool = True
    terms: bool = True
    gronwall_C: object = None

    def __post_init__(self):
        object.__setattr__(self, "N", tuple(int(n) for n in _as_list(self.N, "N")))
        object.__setattr__(self, "theta", tuple(float(t) for t in _as_list(self.theta, "theta")))
        object.__setattr__(self, "seeds", tuple(int(s) for s in _as_list(self.seeds, "seeds")))
        self.validate()

    def validate(self):
        if self.d != 2:
            raise ConfigError("dynamics are two dimensional only (d = 2)")
        if not self.N or min(self.N) < 2:
            raise ConfigError("N values must be >= 2")
        for th in self.theta:
            if not 0 < th < 1:
                raise ConfigError(f"theta must lie in (0, 1), got {th}")
            if th <= 1 - 2 / self.d:
                warnings.warn(f"theta={th} is outside ({1 - 2 / self.d:g}, 1)", stacklevel=3)
        for name in ("T", "dt"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be a positive number")
        if not isinstance(self.m, int) or self.m < 16 or self.m % 2:
            raise ConfigError("m must be an even integer >= 16")
        if not isinstance(self.sample_stride, int) or self.sample_stride < 1:
            raise ConfigError("sample_stride must be a positive integer")
        if self.epsilon_cap != "default":
            c = self.epsilon_cap
            if not (isinstance(c, (int, float)) and 0 < c < 0.125):
                raise ConfigError("epsilon_cap must be 'default' or a number in (0, 1/8)")
        extra = set(self.initial_data) - _INITIAL_KEYS
        if extra:
            raise ConfigError(f"unknown initial_data keys: {sorted(extra)}")
        extra = set(self.vorticity) - _VORTICITY_KEYS
        if extra:
            raise ConfigError(f"unknown vorticity keys: {sorted(extra)}")
        if self.vorticity.get("preset", "taylor_green") not in ("taylor_green", "shear", "random_bandlimited"):
            raise ConfigError(f"unknown vorticity preset {self.vorticity.get('preset')!r}")
        try:
            self.initial_spec(0, self.N[0])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.gronwall_C is not None and not (isinstance(self.gronwall_C, (int, float)) and self.gronwall_C > 0):
            raise ConfigError("gronwall_C must be a positive number or null")

    @property
    def n_steps(self):
        return int(round(self.T / self.dt))

    def initial_spec(self, seed, N):
        opts = dict(self.initial_data)
        return nbody.InitialDataSpec(mode=opts.get("mode", "iid_uniform"),
                                     velocity_noise=float(opts.get("velocity_noise", 0.0)),
                                     rng_seed=cell_seed(seed, N),
                                     jitter=float(opts.get("jitter", 0.25)))

    def cap_for(self, N):
        return me.default_epsilon_cap(N, self.d) if self.epsilon_cap == "default" else float(self.epsilon_cap)

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        try:
            return cls(**doc)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, text):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())

    def to_dict(self):
        out = asdict(self)
        for k in ("N", "theta", "seeds"):
            out[k] = list(out[k])
        return out


def _as_list(v, name):
    if isinstance(v, (list, tuple)):
        return v
    if isinstance(v, (int, float)):
        return (v,)
    raise ConfigError(f"{name} must be a number or a list of numbers")


def cell_seed(seed, N):
    """Initial-data seed for one (seed, N) cell."""
    return int(np.random.SeedSequence([int(seed), int(N)]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# weak-* metric

@dataclass(frozen=True)
class TestFunction:
    """``cos(2 pi k.x) exp(-|v - c|^2 / 2)``; ``k = None`` is the constant 1."""

    k: tuple | None = None
    c: tuple = (0.0, 0.0)

    @property
    def name(self):
        if self.k is None:
            return "one"
        return f"k{self.k[0]}{self.k[1]}_c{self.c[0]:g}{self.c[1]:g}"

    def __call__(self, x, v):
        if self.k is None:
            return np.ones(len(x))
        k = np.asarray(self.k, dtype=float)
        c = np.asarray(self.c, dtype=float)
        return np.cos(2 * np.pi * x @ k) * np.exp(-0.5 * np.sum((v - c) ** 2, axis=-1))


DEFAULT_BATTERY = tuple(TestFunction(k, c) for k in ((1, 0), (0, 1), (1, 1))
                        for c in ((0.0, 0.0), (1.0, 0.0))) + (TestFunction(),)


def weak_star_metric(ensemble, u, battery=DEFAULT_BATTERY, oversample=4):
    """``|(1/N) sum phi(x_i, v_i) - int phi(x, u(x)) dx|`` for every test function."""
    if not battery:
        raise ValueError("battery must not be empty")
    M = oversample * u.m
    grid = sf.grid_coords(M, u.d).reshape(-1, u.d)
    ug = np.stack([sf.resample(c, M).samples().reshape(-1) for c in u], axis=-1)
    out = []
    for phi in battery:
        if phi.k is None:
            out.append(0.0)  # both measures are probabilities
            continue
        emp = float(np.mean(phi(ensemble.positions, ensemble.velocities)))
        out.append(abs(emp - float(np.mean(phi(grid, ug)))))
    return out


# ---------------------------------------------------------------------------
# runs

@dataclass
class FluidSample:
    t: float
    diag: euler2d.EulerDiagnostics
    c1s: float
    grad_inf: float


def fluid_trajectory(config):
    """Euler diagnostics at every sample time (shared by all cells of a config)."""
    v = dict(config.vorticity)
    omega = euler2d.initial_vorticity(v.get("preset", "taylor_green"), config.m,
                                      seed=int(v.get("seed", 0)), max_mode=int(v.get("max_mode", 8)))
    state = euler2d.EulerState(0.0, omega)
    samples = []
    n = config.n_steps
    k = 0
    while True:
        diag = euler2d.diagnostics(state)
        samples.append(FluidSample(k * config.dt, diag, sf.holder_surrogate(diag.u),
                                   sf.grid_norms(diag.u).lip))
        if k >= n:
            break
        step = min(config.sample_stride, n - k)
        state = euler2d.advance(state, config.dt, step)
        k += step
    return samples


RECORD_KEYS = ("t", "kinetic", "F_N", "H", "term1", "term2", "term3", "term4",
               "gronwall_rhs", "min_dist", "min_mu")


def run_cell(config, N, theta, seed, fluid=None, gronwall_C=None):
    """One (N, theta, seed) run; returns the list of JSONL-ready records."""
    fluid = fluid_trajectory(config) if fluid is None else fluid
    u0 = fluid[0].diag.u
    ens = nbody.sample_initial(config.initial_spec(seed, N), N, theta, u0=u0, d=config.d)
    integ = nbody.Integrator(ens, config.dt)
    records = []
    k = 0
    n = config.n_steps
    for sample in fluid:
        t0 = time.perf_counter()
        target = int(round(sample.t / config.dt))
        integ.run(target - k)
        k = target
        e = integ.ens
        br = me.modulated_H(e, sample.diag.u, sample.diag.U)
        terms = me.terms_1_to_4(e, sample.diag) if config.terms else (float("nan"),) * 4
        mu = me.BackgroundDensity.from_corrector(sample.diag.U, e.epsilon)
        rec = {"N": N, "theta": theta, "seed": seed, "t": float(e.time),
               "kinetic": br.kinetic, "F_N": br.potential_FN, "H": br.total_H,
               "term1": terms[0], "term2": terms[1], "term3": terms[2], "term4": terms[3],
               "min_dist": nbody.min_pair_distance(e)[0], "min_mu": mu.min,
               "c1s": sample.c1s, "grad_inf": sample.grad_inf}
        if config.battery:
            rec["weak_star"] = weak_star_metric(e, sample.diag.u)
        rec["retries"] = integ.retries
        rec["wall"] = time.perf_counter() - t0
        records.append(rec)
    if k != n:
        raise RuntimeError("sampling did not reach the horizon")
    C = gronwall_C if gronwall_C is not None else config.gronwall_C
    if C is None:
        from .calibration import load_constants

        C = load_constants()["gronwall"]
    rhs = me.gronwall_rhs(abs(records[0]["H"]), [r["t"] for r in records], [r["c1s"] for r in records],
                          [r["grad_inf"] for r in records], N, integ.ens.epsilon, C, d=config.d)
    for r, g in zip(records, rhs):
        r["gronwall_rhs"] = float(g)
    return records


@dataclass
class ConvergenceReport:
    config: ScenarioConfig
    records: list  # per (N, theta, seed, t)
    failures: list = field(default_factory=list)
    battery: tuple = DEFAULT_BATTERY

    def rows(self):
        """Seed-averaged rows keyed by ``(N, theta, t)``."""
        groups = {}
        for r in self.records:
            groups.setdefault((r["N"], r["theta"], round(r["t"], 12)), []).append(r)
        out = []
        for (N, th, t), rs in sorted(groups.items()):
            row = {"N": N, "theta": th, "t": t}
            for k in ("kinetic", "F_N", "H", "term1", "term2", "term3", "term4", "gronwall_rhs"):
                row[k] = float(np.mean([r[k] for r in rs]))
            row["abs_H"] = float(np.mean([abs(r["H"]) for r in rs]))
            if rs[0].get("weak_star") is not None:
                ws = np.mean([r["weak_star"] for r in rs], axis=0)
                for phi, v in zip(self.battery, ws):
                    row[f"metric_{phi.name}"] = float(v)
            row["wall"] = float(np.sum([r["wall"] for r in rs]))
            out.append(row)
        return out

    def summary(self):
        """Per (N, theta): seed-averaged ``max_t |H|`` and ``max_t`` of each metric."""
        cells = {}
        for r in self.records:
            cells.setdefault((r["N"], r["theta"]), {}).setdefault(r["seed"], []).append(r)
        out = []
        for (N, th), by_seed in sorted(cells.items()):
            row = {"N": N, "theta": th, "seeds": len(by_seed)}
            row["max_abs_H"] = float(np.mean([max(abs(r["H"]) for r in rs) for rs in by_seed.values()]))
            first = next(iter(by_seed.values()))[0]
            if first.get("weak_star") is not None:
                for j, phi in enumerate(self.battery):
                    row[f"max_metric_{phi.name}"] = float(np.mean(
                        [max(r["weak_star"][j] for r in rs) for rs in by_seed.values()]))
            row["gronwall_ok"] = all(abs(r["H"]) <= r["gronwall_rhs"] for rs in by_seed.values() for r in rs)
            out.append(row)
        return out


def run_scenario(config, seed=None, gronwall_C=None):
    """All cells of a config with a single ``(N, theta)`` (or the first of each list)."""
    seeds = config.seeds if seed is None else (int(seed),)
    fluid = fluid_trajectory(config)
    recs = []
    for s in seeds:
        recs += run_cell(config, config.N[0], config.theta[0], s, fluid, gronwall_C)
    return ConvergenceReport(config, recs)


def _sweep_cell(args):
    config, N, theta, seed, fluid, C = args
    try:
        return run_cell(config, N, theta, seed, fluid, C), None
    except Exception as exc:  # recorded per cell; the sweep continues
        return [], {"N": N, "theta": theta, "seed": seed, "error": type(exc).__name__, "message": str(exc)}


def sweep(config, workers=1, gronwall_C=None):
    """Cartesian product of ``N x theta x seeds`` sharing one fluid trajectory."""
    fluid = fluid_trajectory(config)
    jobs = [(config, N, th, s, fluid, gronwall_C) for N in config.N for th in config.theta for s in config.seeds]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_sweep_cell, jobs))
    else:
        results = [_sweep_cell(j) for j in jobs]
    recs, fails = [], []
    for r, f in results:
        recs += r
        if f is not None:
            fails.append(f)
    return ConvergenceReport(config, recs, fails)


# ---------------------------------------------------------------------------
# reports

def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def write_jsonl(records, path):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({k: _jsonable(v) for k, v in r.items()}, sort_keys=True) + "\n")


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_csv(rows, path):
    """Floats written with ``repr`` so they read back bit for bit."""
    if not rows:
        raise ValueError("nothing to write")
    keys = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for r in rows:
            w.writerow([repr(float(r[k])) if isinstance(r[k], float) else r[k] for k in keys])


def read_csv(path):
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        keys = next(rd)
        out = []
        for row in rd:
            rec = {}
            for k, v in zip(keys, row):
                if v in ("True", "False"):
                    rec[k] = v == "True"
                else:
                    try:
                        rec[k] = int(v)
                    except ValueError:
                        rec[k] = float(v)
            out.append(rec)
    return out


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _panel(series, title, x0, y0, w, h):
    """One plot panel: ``series`` maps a label to (t, y) arrays."""
    allx = np.concatenate([np.asarray(t, float) for t, _ in series.values()])
    ally = np.concatenate([np.asarray(y, float) for _, y in series.values()])
    ally = ally[np.isfinite(ally)]
    xlo, xhi = float(allx.min()), float(allx.max())
    ylo, yhi = (float(ally.min()), float(ally.max())) if ally.size else (0.0, 1.0)
    if xhi == xlo:
        xhi = xlo + 1.0
    if yhi == ylo:
        yhi = ylo + 1.0
    parts = [f'<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="#444"/>',
             f'<text x="{x0 + 4}" y="{y0 - 6}" font-size="12">{title}</text>',
             f'<text x="{x0}" y="{y0 + h + 14}" font-size="10">t={xlo:.3g}</text>',
             f'<text x="{x0 + w - 50}" y="{y0 + h + 14}" font-size="10">t={xhi:.3g}</text>',
             f'<text x="{x0 + w + 4}" y="{y0 + 10}" font-size="10">{yhi:.3g}</text>',
             f'<text x="{x0 + w + 4}" y="{y0 + h}" font-size="10">{ylo:.3g}</text>']
    for n, (label, (t, y)) in enumerate(series.items()):
        pts = " ".join(f"{x0 + w * (float(a) - xlo) / (xhi - xlo):.2f},"
                       f"{y0 + h - h * (float(b) - ylo) / (yhi - ylo):.2f}"
                       for a, b in zip(t, y) if math.isfinite(float(b)))
        color = _COLORS[n % len(_COLORS)]
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                     f'data-label="{label}" points="{pts}"/>')
        parts.append(f'<text x="{x0 + w + 60}" y="{y0 + 14 * (n + 1)}" font-size="10" fill="{color}">{label}</text>')
    return parts


def svg_for_theta(rows, theta):
    """Three panels (|H|, Gronwall RHS, largest weak-* metric), one polyline per N."""
    sel = [r for r in rows if r["theta"] == theta]
    Ns = sorted({r["N"] for r in sel})
    metric_keys = [k for k in (sel[0] if sel else {}) if k.startswith("metric_")]
    panels = [("|H|", lambda r: r["abs_H"]), ("Gronwall RHS", lambda r: r["gronwall_rhs"])]
    if metric_keys:
        panels.append(("max weak-* metric", lambda r: max(r[k] for k in metric_keys)))
    W, H = 360, 200
    body = []
    for p, (title, get) in enumerate(panels):
        series = {}
        for N in Ns:
            rs = sorted((r for r in sel if r["N"] == N), key=lambda r: r["t"])
            series[f"N={N}"] = ([r["t"] for r in rs], [get(r) for r in rs])
        body += _panel(series, f"{title}, theta={theta:g}", 40, 30 + p * (H + 50), W, H)
    height = 30 + len(panels) * (H + 50)
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{W + 140}" height="{height}">\n'
            + "\n".join(body) + "\n</svg>\n")


def emit_report(report, fmt, out_dir):
    """Write ``csv`` (time series + summary), ``jsonl`` (raw records) or ``svg`` files."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    written = []
    if fmt == "jsonl":
        p = out / "records.jsonl"
        write_jsonl(report.records, p)
        written.append(p)
    elif fmt == "csv":
        for name, rows in (("timeseries.csv", report.rows()), ("summary.csv", report.summary())):
            p = out / name
            write_csv(rows, p)
            written.append(p)
    elif fmt == "svg":
        rows = report.rows()
        for th in sorted({r["theta"] for r in rows}):
            p = out / f"plots_theta{th:g}.svg"
            p.write_text(svg_for_theta(rows, th))
            written.append(p)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return written


def report_from_records(records, config=None):
    recs = []
    for r in records:
        r = dict(r)
        for k in RECORD_KEYS:
            if r.get(k) is None:
                r[k] = float("nan")
        recs.append(r)
    return ConvergenceReport(config or ScenarioConfig(), recs)


# ---------------------------------------------------------------------------
# calibration runs for the Gronwall constant

def gronwall_calibration_runs(Ns=(256, 1024), seeds=(101, 102, 103), T=0.25, dt=1e-3, m=128):
    """Monokinetic Taylor-Green runs at theta = 0.5 used to fit the Gronwall constant."""
    cfg = ScenarioConfig(N=tuple(Ns), theta=(0.5,), T=T, dt=dt, m=m, seeds=tuple(seeds),
                         battery=False, terms=False, gronwall_C=1.0)
    fluid = fluid_trajectory(cfg)
    runs = []
    for N in Ns:
        for s in seeds:
            recs = run_cell(cfg, N, 0.5, s, fluid)
            runs.append({"t": [r["t"] for r in recs], "H": np.array([r["H"] for r in recs]),
                         "c1s": [r["c1s"] for r in recs], "grad_inf": [r["grad_inf"] for r in recs],
                         "N": N, "epsilon": nbody.epsilon_from_theta(N, 0.5)})
    return runs
