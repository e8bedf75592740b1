"""Empirical constants for the modulated-energy inequalities.

The inequalities hold with dimensional constants that are not explicit. We
estimate each one as the largest ratio needed over a seeded suite of random
configurations, multiply by a safety factor, and freeze the result in
``data/calibration.json``. Regression checks then run a *different* seed of
the same suite against the frozen values.

Suite members (d=2, N alternating 64/256) cycle through three position
families: iid uniform, clustered (Gaussian clumps plus one planted close
pair) and jittered lattices. Each draws its own coupling ``theta``, velocity
field (Taylor-Green or random band-limited), truncation cap and test
function.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from . import euler2d
from . import modulated_energy as me
from . import spectral_field as sf
from .nbody import epsilon_from_theta

SAFETY = 2.0
FIELD_GRID = 64
KINDS = ("iid", "clustered", "lattice")
DEFAULT_PATH = Path(__file__).with_name("data") / "calibration.json"


@lru_cache(maxsize=1)
def load_constants(path=None):
    """Frozen constants as a dict (``melb``, ``mect``, ``mesob``, ``com``, ``gronwall``)."""
    if path is None:
        text = resources.files("mfeuler").joinpath("data/calibration.json").read_text()
    else:
        text = Path(path).read_text()
    return dict(json.loads(text)["constants"])


@dataclass(frozen=True)
class SuiteConfig:
    seed: int
    index: int
    N: int
    kind: str
    theta: float
    field: str  # "taylor_green" or "random:<seed>"
    epsilon_cap: float

    @property
    def epsilon(self):
        return epsilon_from_theta(self.N, self.theta)


def _rng(cfg, stream):
    return np.random.default_rng([cfg.seed, cfg.index, stream])


def suite_config(seed, index):
    rng = np.random.default_rng([seed, index])
    N = (64, 256)[index % 2]
    kind = KINDS[(index // 2) % 3]
    theta = float(rng.uniform(0.2, 0.8))
    field = "taylor_green" if rng.uniform() < 0.4 else f"random:{int(rng.integers(2**31))}"
    cap = min(me.default_epsilon_cap(N) * 2.0 ** rng.uniform(-1.0, 1.0), 0.12)
    return SuiteConfig(seed, index, N, kind, theta, field, float(cap))


def suite_positions(cfg):
    rng = _rng(cfg, 1)
    N = cfg.N
    if cfg.kind == "iid":
        return rng.uniform(size=(N, 2))
    if cfg.kind == "lattice":
        side = int(round(math.sqrt(N)))
        cells = np.stack(np.meshgrid(np.arange(side), np.arange(side), indexing="ij"), -1).reshape(-1, 2)
        jitter = rng.uniform(0.0, 0.45)
        return ((cells + 0.5 + rng.uniform(-jitter, jitter, (N, 2))) / side) % 1.0
    n_c = int(rng.integers(3, 9))
    centers = rng.uniform(size=(n_c, 2))
    spread = 10.0 ** rng.uniform(-2.0, -1.0)
    x = centers[rng.integers(n_c, size=N)] + spread * rng.standard_normal((N, 2))
    # one planted close pair
    gap = 10.0 ** rng.uniform(-4.0, -2.0)
    ang = rng.uniform(0, 2 * np.pi)
    x[1] = x[0] + gap * np.array([np.cos(ang), np.sin(ang)])
    return x % 1.0


@lru_cache(maxsize=64)
def _velocity(field):
    if field == "taylor_green":
        w = euler2d.taylor_green(FIELD_GRID)
    else:
        w = euler2d.random_bandlimited(FIELD_GRID, int(field.split(":")[1]), max_mode=4)
    u = euler2d.velocity(w)
    return u, euler2d.compute_U(u)


def _test_function(cfg):
    rng = _rng(cfg, 2)
    k = sf.wavenumbers(FIELD_GRID)
    kx, ky = np.meshgrid(k, k, indexing="ij")
    band = (np.abs(kx) <= 4) & (np.abs(ky) <= 4)
    c = np.where(band, rng.standard_normal(kx.shape) + 1j * rng.standard_normal(kx.shape), 0.0)
    phi = sf.ScalarField.from_samples(sf.ScalarField(c).samples())
    return phi * (1.0 / sf.grid_norms(phi).lip)


def evaluate_config(cfg):
    """Raw quantities entering every inequality, for one suite member."""
    x = suite_positions(cfg)
    u, U = _velocity(cfg.field)
    mu = me.BackgroundDensity.from_corrector(U, cfg.epsilon)
    cap = cfg.epsilon_cap
    eta = cap * _rng(cfg, 3).uniform(0.5, 1.0, cfg.N)
    melb = me.melb_check(x, mu, eta, C=1.0)
    ect, si = me.mect_check(x, mu, cap, C=1.0)
    sob = me.sobolev_dual_bound(_test_function(cfg), x, mu, cap, C_out=1.0, C_in=1.0)
    com = me.commutator_bound_check(u, x, mu, cap, C=1.0)
    return {
        "F_N": melb.extra["F_N"],
        "melb_lhs": melb.lhs, "melb_smeared": melb.extra["smeared"], "melb_err": melb.extra["error_term"],
        "mect_smeared": ect.lhs, "mect_self": si.lhs, "mect_err": ect.extra["error_term"],
        "sob_lhs": sob.lhs, "sob_lip": sob.extra["grad_inf"], "sob_l2": sob.extra["grad_l2"], "cap": cap,
        "com_lhs": com.lhs, "com_grad": com.extra["grad_inf"],
    }


def required_constants(raw, C_in):
    """Smallest constant each inequality needs on one configuration."""
    F = raw["F_N"]
    melb = (raw["melb_lhs"] - F + raw["melb_smeared"]) / raw["melb_err"]
    mect = max(raw["mect_smeared"] - F, raw["mect_self"] - F) / raw["mect_err"]
    inner = max(F + C_in * raw["mect_err"], 0.0)
    mesob = raw["sob_lhs"] / (raw["cap"] * raw["sob_lip"] + raw["sob_l2"] * math.sqrt(inner))
    com = raw["com_lhs"] / (raw["com_grad"] * (abs(F) + raw["mect_err"]))
    return {"melb": melb, "mect": mect, "mesob": mesob, "com": com}


def run_suite(seed, n_configs, progress=None):
    raws = []
    for i in range(n_configs):
        raws.append(evaluate_config(suite_config(seed, i)))
        if progress is not None:
            progress(i, raws[-1])
    return raws


def calibrate_static(seed=1, n_configs=1000, safety=SAFETY, progress=None):
    """Constants for the static inequalities from one suite seed."""
    raws = run_suite(seed, n_configs, progress)
    mect = max(required_constants(r, 0.0)["mect"] for r in raws)
    C_in = safety * max(mect, 0.0)
    need = [required_constants(r, C_in) for r in raws]
    out = {k: safety * max(0.0, max(n[k] for n in need)) for k in ("melb", "mect", "mesob", "com")}
    out["mect"] = C_in
    stats = {k: float(max(n[k] for n in need)) for k in out}
    return out, stats


def check_static(constants, seed=2, n_configs=1000, progress=None):
    """Violations of each inequality on a suite seed under frozen constants."""
    violations = {k: [] for k in ("melb", "mect", "mesob", "com")}
    worst = {k: 0.0 for k in violations}
    for i in range(n_configs):
        raw = evaluate_config(suite_config(seed, i))
        need = required_constants(raw, constants["mect"])
        for k in violations:
            worst[k] = max(worst[k], need[k] / constants[k] if constants[k] > 0 else math.inf)
            if need[k] > constants[k]:
                violations[k].append(i)
        if progress is not None:
            progress(i, raw)
    return violations, worst


def calibrate_gronwall(runs, safety=SAFETY):
    """Smallest ``C`` with ``|H(t)| <= gronwall_rhs(t; C)`` on every sampled time of every run.

    ``runs`` holds dicts with keys ``t``, ``H``, ``c1s``, ``grad_inf``, ``N``, ``epsilon``.
    """
    def ok(C):
        for r in runs:
            rhs = me.gronwall_rhs(abs(r["H"][0]), r["t"], r["c1s"], r["grad_inf"], r["N"], r["epsilon"], C)
            if np.any(np.abs(r["H"]) > rhs):
                return False
        return True

    lo, hi = 0.0, 1.0
    while not ok(hi):
        lo, hi = hi, 2 * hi
        if hi > 1e6:
            raise RuntimeError("no Gronwall constant below 1e6 fits the calibration runs")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        lo, hi = (lo, mid) if ok(mid) else (mid, hi)
    return safety * hi, hi


def write_constants(constants, stats, meta, path=DEFAULT_PATH):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"constants": constants, "required_max": stats, "meta": meta}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    load_constants.cache_clear()
    return path
