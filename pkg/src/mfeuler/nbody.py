"""N-body dynamics with weak periodic Coulomb repulsion on the unit torus.

    dx_i/dt = v_i,   dv_i/dt = -1/(eps^2 N) sum_{j != i} grad g(x_i - x_j)

Pair sums over all N particles use an Ewald split tuned for many sources:
a minimum-image real-space loop (compiled with numba, cutoff below half the
box) plus structure factors on a cubic block of reciprocal modes.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, replace

import numba
import numpy as np
from scipy.special import erfc, exp1

from .torus_coulomb import SingularityError, wrap


class CollisionError(RuntimeError):
    """Raised when two particles come closer than the collision floor."""


# ---------------------------------------------------------------------------
# Ewald sums over a particle configuration

@dataclass(frozen=True)
class PairEwald:
    """Split parameters for whole-configuration sums.

    ``r_cut`` must stay below 1/2 so a single minimum image suffices; with
    ``alpha r_cut = sqrt(30)`` and ``pi kmax / alpha >= sqrt(30)`` both
    truncation errors are ~ exp(-30).
    """

    alpha: float
    r_cut: float
    kmax: int

    @classmethod
    def default(cls):
        r_cut = 0.49
        alpha = math.sqrt(30.0) / r_cut
        kmax = int(math.ceil(math.sqrt(30.0) * alpha / math.pi))
        return cls(alpha, r_cut, kmax)


PAIR_EWALD = PairEwald.default()


@numba.njit(cache=True)
def _real_forces(x, alpha, r_cut, d3):
    # sum_{j != i} grad G_alpha(x_i - x_j) over minimum images within r_cut
    n, d = x.shape
    out = np.zeros((n, d))
    rc2 = r_cut * r_cut
    a2 = alpha * alpha
    c3 = 2.0 * alpha / math.sqrt(math.pi)
    dx = np.empty(d)
    for i in range(n):
        for j in range(n):
            if j == i:
                continue
            r2 = 0.0
            for a in range(d):
                t = x[i, a] - x[j, a]
                t -= math.floor(t + 0.5)
                dx[a] = t
                r2 += t * t
            if r2 >= rc2:
                continue
            if r2 == 0.0:
                return out, False
            if d3:
                r = math.sqrt(r2)
                f = -(math.erfc(alpha * r) / r2 + c3 * math.exp(-a2 * r2) / r) / (4.0 * math.pi * r)
            else:
                f = -math.exp(-a2 * r2) / (2.0 * math.pi * r2)
            for a in range(d):
                out[i, a] += f * dx[a]
    return out, True


@numba.njit(cache=True)
def _pair_r2(x, r_cut):
    # squared minimum-image distances of pairs i < j within r_cut
    n, d = x.shape
    rc2 = r_cut * r_cut
    buf = np.empty(n * (n - 1) // 2)
    cnt = 0
    for i in range(n):
        for j in range(i + 1, n):
            r2 = 0.0
            for a in range(d):
                t = x[i, a] - x[j, a]
                t -= math.floor(t + 0.5)
                r2 += t * t
            if r2 < rc2:
                buf[cnt] = r2
                cnt += 1
    return buf[:cnt]


@numba.njit(cache=True)
def _nearest(x):
    n, d = x.shape
    nn = np.full(n, np.inf)
    for i in range(n):
        for j in range(i + 1, n):
            r2 = 0.0
            for a in range(d):
                t = x[i, a] - x[j, a]
                t -= math.floor(t + 0.5)
                r2 += t * t
            if r2 < nn[i]:
                nn[i] = r2
            if r2 < nn[j]:
                nn[j] = r2
    return np.sqrt(nn)


def _recip_setup(d, alpha, kmax):
    ks = np.arange(-kmax, kmax + 1, dtype=float)
    grids = np.meshgrid(*([ks] * d), indexing="ij")
    k2 = sum(g * g for g in grids)
    with np.errstate(divide="ignore"):
        coef = np.exp(-np.pi**2 * k2 / alpha**2) / (4 * np.pi**2 * k2)
    coef[k2 == 0] = 0.0
    return ks, grids, coef


def _structure(x, ks):
    E = np.exp(2j * np.pi * x[:, :, None] * ks[None, None, :])  # (N, d, K)
    d = x.shape[1]
    if d == 2:
        S = E[:, 0].T @ E[:, 1]
    else:
        K = ks.size
        S = np.einsum("na,nb,nc->abc", E[:, 0], E[:, 1], E[:, 2], optimize=True)
        S = S.reshape(K, K, K)
    return E, S


def _apply(E, A):
    """sum_k A[k] prod_a E[n, a, k_a] for every particle n."""
    d = E.shape[1]
    if d == 2:
        return np.einsum("nb,nb->n", E[:, 0] @ A, E[:, 1])
    K = A.shape[0]
    t = (E[:, 0] @ A.reshape(K, K * K)).reshape(-1, K, K)
    t = np.einsum("nbc,nb->nc", t, E[:, 1])
    return np.einsum("nc,nc->n", t, E[:, 2])


def pair_gradient_sums(x, ewald=PAIR_EWALD):
    """``sum_{j != i} grad g(x_i - x_j)`` for every i, shape ``(N, d)``."""
    x = np.ascontiguousarray(wrap(x))
    n, d = x.shape
    real, ok = _real_forces(x, ewald.alpha, ewald.r_cut, d == 3)
    if not ok:
        raise SingularityError("coincident particle positions")
    ks, grids, coef = _recip_setup(d, ewald.alpha, ewald.kmax)
    E, S = _structure(x, ks)
    A = coef * np.conj(S)
    out = real
    for a in range(d):
        out[:, a] += _apply(E, 2j * np.pi * grids[a] * A).real
    return out


def pair_potential_sum(x, ewald=PAIR_EWALD):
    """``sum_{i != j} g(x_i - x_j)`` (each unordered pair counted twice)."""
    x = np.ascontiguousarray(wrap(x))
    n, d = x.shape
    r2 = _pair_r2(x, ewald.r_cut)
    if np.any(r2 == 0.0):
        raise SingularityError("coincident particle positions")
    if d == 2:
        real = np.sum(exp1(ewald.alpha**2 * r2)) / (4 * np.pi)
    else:
        r = np.sqrt(r2)
        real = np.sum(erfc(ewald.alpha * r) / r) / (4 * np.pi)
    ks, grids, coef = _recip_setup(d, ewald.alpha, ewald.kmax)
    _, S = _structure(x, ks)
    recip = float(np.sum(coef * (np.abs(S) ** 2 - n)))
    return 2 * real + recip - n * (n - 1) / (4 * ewald.alpha**2)


# ---------------------------------------------------------------------------
# ensemble

def epsilon_from_theta(N, theta):
    """``eps = N^{(theta - 1)/2}`` so that ``eps^2 N = N^theta``."""
    return float(N) ** ((theta - 1.0) / 2.0)


@dataclass(frozen=True)
class ParticleEnsemble:
    positions: np.ndarray
    velocities: np.ndarray
    epsilon: float
    theta: float = float("nan")
    time: float = 0.0

    def __post_init__(self):
        x = wrap(np.asarray(self.positions, dtype=float))
        v = np.asarray(self.velocities, dtype=float)
        if x.ndim != 2 or x.shape != v.shape or x.shape[1] not in (2, 3):
            raise ValueError("positions and velocities must both have shape (N, d), d in {2, 3}")
        if x.shape[0] < 2:
            raise ValueError("need at least two particles")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        object.__setattr__(self, "positions", x)
        object.__setattr__(self, "velocities", v)

    @property
    def N(self):
        return self.positions.shape[0]

    @property
    def d(self):
        return self.positions.shape[1]

    @classmethod
    def from_theta(cls, positions, velocities, theta, time=0.0):
        n = np.shape(positions)[0]
        return cls(positions, velocities, epsilon_from_theta(n, theta), theta, time)


def total_force(ens, ewald=PAIR_EWALD):
    """Accelerations ``-(eps^2 N)^{-1} sum_{j != i} grad g(x_i - x_j)``."""
    return -pair_gradient_sums(ens.positions, ewald) / (ens.epsilon**2 * ens.N)


def total_energy(ens, ewald=PAIR_EWALD):
    """``(1/2N) sum |v_i|^2 + (1/(2 eps^2 N^2)) sum_{i != j} g(x_i - x_j)``."""
    kin = 0.5 * np.sum(ens.velocities**2) / ens.N
    pot = pair_potential_sum(ens.positions, ewald) / (2 * ens.epsilon**2 * ens.N**2)
    return float(kin + pot)


def min_pair_distance(ens_or_positions):
    """Smallest minimum-image pair distance and the per-particle nearest-neighbour distances."""
    x = getattr(ens_or_positions, "positions", ens_or_positions)
    x = np.ascontiguousarray(wrap(np.asarray(x, dtype=float)))
    nn = _nearest(x)
    return float(nn.min()), nn


def _kdk(x, v, acc, dt, force, floor):
    vh = v + 0.5 * dt * acc
    xn = wrap(x + dt * vh)
    if floor > 0 and min_pair_distance(xn)[0] < floor:
        raise CollisionError(f"particles closer than {floor:g} after a step of {dt:g}")
    an = force(xn)
    return xn, vh + 0.5 * dt * an, an


def leapfrog_step(ens, dt, collision_floor=1e-9, ewald=PAIR_EWALD):
    """One kick-drift-kick velocity-Verlet step (negative ``dt`` runs backwards)."""
    def force(x):
        return -pair_gradient_sums(x, ewald) / (ens.epsilon**2 * ens.N)

    x, v, _ = _kdk(ens.positions, ens.velocities, force(ens.positions), dt, force, collision_floor)
    return replace(ens, positions=x, velocities=v, time=ens.time + dt)


class Integrator:
    """Velocity Verlet that reuses the end-of-step force as the next start force.

    A step that would bring two particles within ``collision_floor`` is retried
    once as two half steps; a second failure raises :class:`CollisionError`.
    """

    def __init__(self, ens, dt, collision_floor=1e-9, ewald=PAIR_EWALD):
        self.ens = ens
        self.dt = dt
        self.collision_floor = collision_floor
        self.ewald = ewald
        self.retries = 0
        self._acc = self._force(ens.positions)

    def _force(self, x):
        return -pair_gradient_sums(x, self.ewald) / (self.ens.epsilon**2 * self.ens.N)

    def step(self):
        e, dt = self.ens, self.dt
        try:
            x, v, a = _kdk(e.positions, e.velocities, self._acc, dt, self._force, self.collision_floor)
        except CollisionError:
            self.retries += 1
            x, v, a = e.positions, e.velocities, self._acc
            for _ in range(2):
                x, v, a = _kdk(x, v, a, dt / 2, self._force, self.collision_floor)
        self._acc = a
        self.ens = replace(e, positions=x, velocities=v, time=e.time + dt)
        return self.ens

    def run(self, n_steps):
        for _ in range(n_steps):
            self.step()
        return self.ens


# ---------------------------------------------------------------------------
# initial data

@dataclass(frozen=True)
class InitialDataSpec:
    mode: str = "iid_uniform"
    velocity_noise: float = 0.0
    rng_seed: int = 0
    jitter: float = 0.25  # perturbed lattice: uniform offset in +-jitter cell widths

    def __post_init__(self):
        if self.mode not in ("iid_uniform", "perturbed_lattice"):
            raise ValueError(f"unknown initial-data mode {self.mode!r}")
        if not (np.isfinite(self.velocity_noise) and self.velocity_noise >= 0):
            raise ValueError("velocity_noise must be finite and >= 0")


def _unit_ball(rng, n, d):
    g = rng.standard_normal((n, d))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return g * rng.uniform(size=(n, 1)) ** (1.0 / d)


def sample_positions(spec, N, d, rng):
    if spec.mode == "iid_uniform":
        return rng.uniform(size=(N, d))
    side = int(math.ceil(N ** (1.0 / d) - 1e-9))
    cells = np.stack(np.meshgrid(*([np.arange(side)] * d), indexing="ij"), -1).reshape(-1, d)
    cells = cells[np.sort(rng.permutation(len(cells))[:N])] if len(cells) > N else cells
    offs = rng.uniform(-spec.jitter, spec.jitter, size=(N, d))
    return wrap((cells + 0.5 + offs) / side)


def sample_initial(spec, N, theta, u0=None, d=2, epsilon=None):
    """Seeded initial ensemble with ``v_i = u0(x_i) + eta_N xi_i``, xi uniform in the unit ball."""
    if N < 2:
        raise ValueError("need N >= 2")
    rng = np.random.default_rng(spec.rng_seed)
    while True:
        x = sample_positions(spec, N, d, rng)
        if min_pair_distance(x)[0] > 0:
            break
    v = np.zeros((N, d)) if u0 is None else np.asarray(u0(x), dtype=float).reshape(N, d)
    if spec.velocity_noise > 0:
        v = v + spec.velocity_noise * _unit_ball(rng, N, d)
    eps = epsilon_from_theta(N, theta) if epsilon is None else epsilon
    return ParticleEnsemble(x, v, eps, theta, 0.0)


# ---------------------------------------------------------------------------
# trajectory output

def trajectory_record(ens):
    return json.dumps({"t": ens.time, "positions": ens.positions.tolist(),
                       "velocities": ens.velocities.tolist()})


def write_snapshot(ens, path):
    """int64 N, int64 d, float64 t, then positions and velocities (row-major, LE)."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<qqd", ens.N, ens.d, ens.time))
        fh.write(np.ascontiguousarray(ens.positions, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ens.velocities, dtype="<f8").tobytes())


def read_snapshot(path, epsilon, theta=float("nan")):
    with open(path, "rb") as fh:
        data = fh.read()
    n, d, t = struct.unpack_from("<qqd", data)
    arr = np.frombuffer(data, dtype="<f8", offset=24).reshape(2, n, d)
    return ParticleEnsemble(arr[0].copy(), arr[1].copy(), epsilon, theta, t)
