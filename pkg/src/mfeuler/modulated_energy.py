"""Modulated energy of a particle ensemble against a background density.

With ``emp = (1/N) sum_i delta_{x_i}`` and ``mu = 1 + eps^2 U`` (``U`` the
velocity-gradient corrector ``d_a u^b d_b u^a``):

    F_N(x, mu) = int int_{x != y} g(x - y) d(emp - mu)^2
    H = (1/2N) sum_i |u(x_i) - v_i|^2 + F_N / (2 eps^2)

Besides ``F_N`` and ``H`` this module evaluates the four terms of ``dH/dt``,
the renormalized commutator, smeared potentials and the inequalities that
control them. Inequality constants are empirical (see
:mod:`mfeuler.calibration`); every check takes an explicit constant or falls
back to the frozen calibrated value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid

from . import nbody
from . import smearing
from . import spectral_field as sf
from .smearing import ResolutionError
from .spectral_field import ScalarField, VectorField
from .torus_coulomb import (SingularityError, eval_g_eta, eval_grad_g, free_g,
                            minimum_image, sphere_quadrature, wrap)

__all__ = [
    "BackgroundDensity", "TruncationRadii", "EnergyBreakdown", "SmearedEnergy",
    "BoundCheck", "ResolutionError", "F_N", "modulated_H", "truncation_radii",
    "smeared_field_energy", "bilinear_smeared_energy", "self_energy",
    "melb_check", "mect_check", "sobolev_dual_bound", "commutator_lhs",
    "commutator_brute_force", "commutator_bound_check", "terms_1_to_4",
    "gronwall_rhs", "default_epsilon_cap",
]


# ---------------------------------------------------------------------------
# types

@dataclass(frozen=True)
class BackgroundDensity:
    """``mu = 1 + eps^2 U`` on a grid; the mean must be 1."""

    mu: ScalarField
    epsilon: float = float("nan")

    def __post_init__(self):
        if abs(self.mu.mean() - 1.0) > 1e-12:
            raise ValueError(f"background density must have mean 1, got {self.mu.mean()!r}")
        if not _is_real(self.mu):
            raise ValueError("background density must be real valued")

    @classmethod
    def from_corrector(cls, U, epsilon):
        c = U.coeffs.copy()
        c.flat[0] = 0.0
        return cls(ScalarField(epsilon**2 * c) + 1.0, epsilon)

    @classmethod
    def uniform(cls, m=64, d=2):
        return cls(ScalarField.zeros(m, d) + 1.0)

    @property
    def linf(self):
        return float(np.max(np.abs(sf.oversampled(self.mu, 2))))

    @property
    def min(self):
        return float(np.min(sf.oversampled(self.mu, 2)))


def _is_real(f):
    return float(np.max(np.abs(np.fft.ifftn(f.coeffs).imag))) * f.coeffs.size < 1e-10


def _mu(mu):
    return mu.mu if isinstance(mu, BackgroundDensity) else mu


@dataclass(frozen=True)
class TruncationRadii:
    r: np.ndarray
    epsilon_cap: float


@dataclass(frozen=True)
class EnergyBreakdown:
    kinetic: float
    potential_FN: float
    total_H: float
    terms: tuple = (float("nan"),) * 4
    bound_rhs: float = float("nan")


@dataclass(frozen=True)
class SmearedEnergy:
    grad_l2_sq: float
    field: ScalarField | None = None


@dataclass(frozen=True)
class BoundCheck:
    lhs: float
    rhs: float
    constant: float
    extra: dict = field(default_factory=dict)

    @property
    def holds(self):
        return bool(self.lhs <= self.rhs)

    @property
    def margin(self):
        return self.rhs - self.lhs


def default_epsilon_cap(N, d=2):
    """``N^{-1/d} / 8``, the cap that balances the error terms."""
    return float(N) ** (-1.0 / d) / 8.0


def _constant(name, C):
    if C is not None:
        return float(C)
    from .calibration import load_constants

    return load_constants()[name]


def _positions(x):
    x = wrap(np.atleast_2d(np.asarray(getattr(x, "positions", x), dtype=float)))
    return np.ascontiguousarray(x)


# ---------------------------------------------------------------------------
# field helpers

def _common(*fields):
    """Resample fields to one grid twice the largest size (room for exact products)."""
    m = 2 * max(f.m for f in fields)
    return [sf.resample(f, m) for f in fields]


def _potential_at(mu, x):
    """``(g * mu)(x_i)``; only the non-constant part of ``mu`` contributes."""
    return sf.evaluate_at(sf.convolve_g(mu), x)


def _field_energy(mu):
    return smearing.mu_energy(mu)


def _check_distinct(x):
    if len(x) > 1:
        dmin, _ = nbody.min_pair_distance(x)
        if dmin == 0.0:
            raise SingularityError("coincident particle positions")


# ---------------------------------------------------------------------------
# modulated energy

def F_N(positions, mu):
    """``F_N(x, mu)`` by the three-part expansion (pair sum, particle-field, field-field)."""
    x = _positions(positions)
    mu = _mu(mu)
    N = len(x)
    _check_distinct(x)
    pair = nbody.pair_potential_sum(x) if N > 1 else 0.0
    cross = np.sum(_potential_at(mu, x))
    return float(pair / N**2 - 2.0 * cross / N + _field_energy(mu))


def modulated_H(ensemble, u, U, terms=None, bound_rhs=float("nan")):
    """Kinetic part, ``F_N`` and ``H`` for an ensemble against the fluid velocity ``u``."""
    eps = ensemble.epsilon
    w = sf.evaluate_at(u, ensemble.positions) - ensemble.velocities
    kin = 0.5 * float(np.mean(np.sum(w * w, axis=1)))
    mu = BackgroundDensity.from_corrector(U, eps)
    F = F_N(ensemble.positions, mu)
    t = tuple(terms) if terms is not None else (float("nan"),) * 4
    return EnergyBreakdown(kin, F, kin + F / (2 * eps**2), t, bound_rhs)


def truncation_radii(positions, epsilon_cap):
    """``r_i = min(nn_i / 4, epsilon_cap)`` with ``nn_i`` the nearest-neighbour distance."""
    if not 0 < epsilon_cap < 0.125:
        raise ValueError("epsilon_cap must lie in (0, 1/8)")
    x = _positions(positions)
    if len(x) == 1:
        return TruncationRadii(np.array([epsilon_cap]), epsilon_cap)
    _, nn = nbody.min_pair_distance(x)
    return TruncationRadii(np.minimum(nn / 4.0, epsilon_cap), epsilon_cap)


def _radii(radii, N):
    r = np.asarray(getattr(radii, "r", radii), dtype=float)
    if r.ndim == 0:
        r = np.full(N, float(r))
    if np.any(r <= 0) or np.any(r >= 0.25):
        raise ValueError("smearing radii must lie in (0, 1/4)")
    return r


def smeared_field_energy(positions, radii, mu, m=None):
    """``int |grad H|^2`` for ``H = g * ((1/N) sum_i sigma_{x_i, r_i} - mu)``.

    The Plancherel series ``sum_k |nu_k - mu_k|^2 / (4 pi^2 |k|^2)`` converges
    only like ``1/K`` for sphere measures, so it is summed with a Gaussian
    split: the damped part mode by mode, the complement in physical space
    per particle pair. Pass ``m`` to also get the potential ``H`` on a grid;
    the grid must satisfy ``m >= max(64, 4 / min r)``.
    """
    x = _positions(positions)
    r = _radii(radii, len(x))
    mu = _mu(mu)
    energy = smearing.smeared_energy(x, r, mu)
    H = smearing.smeared_potential_field(x, r, mu, m) if m is not None else None
    return SmearedEnergy(float(energy), H)


def grid_gradient_energy(H):
    """``int |grad H|^2`` of a grid field by Parseval (truncated to the grid modes)."""
    return sf.pair_integral(H, sf.laplacian(-1.0 * H))


def self_energy(eta, d, n_nodes=None):
    """``int int g d sigma d sigma`` for one sphere of radius ``eta``, by quadrature.

    Equals the truncated potential ``g_eta`` averaged over the sphere.
    """
    nodes, w = sphere_quadrature(np.zeros(d), eta, n_nodes)
    return float(np.sum(w * eval_g_eta(nodes, eta)))


def bilinear_smeared_energy(positions, radii, mu, n_nodes=None):
    """``int int g d(nu - mu)^2`` by direct quadrature over the spheres.

    Sphere pairs use the truncated potential of one sphere averaged over the
    nodes of the other; particle-field terms average ``g * mu`` over each
    sphere. Accurate when the spheres are disjoint (as for the radii of
    :func:`truncation_radii`); overlapping spheres converge only
    algebraically in ``n_nodes``.
    """
    x = _positions(positions)
    N, d = x.shape
    r = _radii(radii, N)
    mu = _mu(mu)
    if n_nodes is None:
        n_nodes = 128 if d == 2 else 590
    nodes, w = [], None
    for i in range(N):
        y, w = sphere_quadrature(x[i], r[i], n_nodes)
        nodes.append(y)
    total = 0.0
    for i in range(N):
        for j in range(N):
            vals = eval_g_eta(minimum_image(nodes[j] - x[i]), r[i])
            total += float(np.sum(w * vals))
    gmu = sf.convolve_g(mu)
    cross = sum(float(np.sum(w * sf.evaluate_at(gmu, nodes[i]))) for i in range(N))
    return total / N**2 - 2.0 * cross / N + _field_energy(mu)


# ---------------------------------------------------------------------------
# inequalities

def _log_or_power(eta, d):
    eta = np.asarray(eta, dtype=float)
    return np.abs(np.log(eta)) if d == 2 else eta ** (2.0 - d)


def _mu_linf(mu):
    return float(np.max(np.abs(sf.oversampled(mu, 2))))


def melb_check(positions, mu, radii, C=None):
    """Lower bound of ``F_N`` by the smeared energy and truncated pair interactions.

    ``(1/N^2) sum_{i != j} (g_R(|x_i - x_j|) - g_R(eta_i))_+`` is compared with
    ``F_N + (C/N^2) sum_j |ln eta_j| - int |grad H_eta|^2 + C (1 + |mu|_inf)/N sum_j eta_j^2``
    (``eta_j^{2-d}`` replaces ``|ln eta_j|`` for d=3).
    """
    C = _constant("melb", C)
    x = _positions(positions)
    N, d = x.shape
    eta = _radii(radii, N)
    if np.any(eta >= 0.125):
        raise ValueError("radii must be below 1/8")
    mu = _mu(mu)
    lhs = 0.0
    if N > 1:
        diff = minimum_image(x[:, None, :] - x[None, :, :])
        dist = np.linalg.norm(diff, axis=-1)
        np.fill_diagonal(dist, np.inf)
        gap = free_g(dist, d) - free_g(eta, d)[:, None]
        np.fill_diagonal(gap, 0.0)
        lhs = float(np.sum(np.maximum(gap, 0.0))) / N**2
    F = F_N(x, mu)
    E = smeared_field_energy(x, eta, mu).grad_l2_sq
    err = float(np.sum(_log_or_power(eta, d))) / N**2 + (1 + _mu_linf(mu)) * float(np.sum(eta**2)) / N
    rhs = F + C * err - E
    return BoundCheck(lhs, rhs, C, {"F_N": F, "smeared": E, "error_term": err})


def _mect_error(N, d, epsilon_cap, mu):
    return float(_log_or_power(epsilon_cap, d)) / N + (1 + _mu_linf(mu)) * epsilon_cap**2


def mect_check(positions, mu, epsilon_cap, C=None):
    """Both truncation-radius bounds: smeared energy and self-interaction.

    Returns ``(energy_check, self_check)`` with
    ``int |grad H_r|^2 <= F_N + C E`` and ``(1/N^2) sum_i g_R(r_i) <= F_N + C E``,
    ``E = |ln eps|/N + (1 + |mu|_inf) eps^2`` (``eps^{2-d}/N`` for d=3).
    """
    C = _constant("mect", C)
    x = _positions(positions)
    N, d = x.shape
    mu = _mu(mu)
    r = truncation_radii(x, epsilon_cap).r
    F = F_N(x, mu)
    E = smeared_field_energy(x, r, mu).grad_l2_sq
    si = float(np.sum(free_g(r, d))) / N**2
    err = _mect_error(N, d, epsilon_cap, mu)
    rhs = F + C * err
    extra = {"F_N": F, "error_term": err}
    return BoundCheck(E, rhs, C, extra), BoundCheck(si, rhs, C, extra)


def sobolev_dual_bound(test_phi, positions, mu, epsilon_cap, C_out=None, C_in=None):
    """``|int phi d(emp - mu)|`` against its Lipschitz/energy bound.

    ``rhs = C_out (eps |grad phi|_inf + |grad phi|_2 (F_N + C_in E)_+^{1/2})``
    with ``E`` as in :func:`mect_check`.
    """
    C_out = _constant("mesob", C_out)
    C_in = _constant("mect", C_in)
    x = _positions(positions)
    N, d = x.shape
    mu = _mu(mu)
    phi_c, mu_c = _common(test_phi, mu)
    lhs = abs(float(np.mean(sf.evaluate_at(test_phi, x))) - sf.pair_integral(phi_c, mu_c))
    norms = sf.grid_norms(test_phi)
    grad_l2 = math.sqrt(sum(float(np.sum(np.abs(c.coeffs) ** 2)) for c in sf.gradient(test_phi)))
    F = F_N(x, mu)
    inner = max(F + C_in * _mect_error(N, d, epsilon_cap, mu), 0.0)
    rhs = C_out * (epsilon_cap * norms.lip + grad_l2 * math.sqrt(inner))
    return BoundCheck(lhs, rhs, C_out, {"F_N": F, "grad_inf": norms.lip, "grad_l2": grad_l2})


# ---------------------------------------------------------------------------
# commutator

def _commutator_field_parts(v, x, mu):
    """Per-particle ``v(x_i).grad(g*mu)(x_i) - div(g*(v mu))(x_i)`` and ``2 int mu v.grad(g*mu)``."""
    comps = _common(mu, *v)
    mu2, v2 = comps[0], VectorField(comps[1:])
    gmu = sf.convolve_g(mu2)
    grad_gmu = sf.gradient(gmu)
    vmu = VectorField(sf.multiply(c, mu2) for c in v2)
    div_gvmu = sf.divergence(VectorField(sf.convolve_g(c) for c in vmu))
    per_particle = (np.sum(sf.evaluate_at(v, x) * sf.evaluate_at(grad_gmu, x), axis=1)
                    - sf.evaluate_at(div_gvmu, x))
    field_field = 2.0 * sum(sf.pair_integral(vmu[a], grad_gmu[a]) for a in range(len(v)))
    return per_particle, field_field


def commutator_lhs(v, positions, mu):
    """Renormalized commutator ``int int_{x != y} (v(x) - v(y)).grad g(x - y) d(emp - mu)^2``.

    The pair part reduces to ``(2/N^2) sum_i v(x_i).sum_{j != i} grad g(x_i - x_j)``;
    the particle-field and field-field parts use
    ``int (v(x) - v(y)).grad g(x - y) rho(y) dy = v.grad(g*rho) - div(g*(v rho))``.
    """
    x = _positions(positions)
    mu = _mu(mu)
    N = len(x)
    _check_distinct(x)
    pair = 0.0
    if N > 1:
        pair = 2.0 * float(np.sum(sf.evaluate_at(v, x) * nbody.pair_gradient_sums(x))) / N**2
    per_particle, field_field = _commutator_field_parts(v, x, mu)
    return float(pair - 2.0 * np.sum(per_particle) / N + field_field)


def _shifted_samples(f, shift, m):
    """Samples of ``f`` on the grid ``shift + k/m``, by a Fourier phase shift."""
    f = sf.resample(f, m)
    phase = 1.0
    for a, k in enumerate(f.wavevectors()):
        phase = phase * np.exp(2j * np.pi * k * shift[a])
    return ScalarField(f.coeffs * phase).samples()


def commutator_brute_force(v, positions, mu, m=256):
    """Independent evaluation of :func:`commutator_lhs` by direct quadrature.

    Particle pairs are summed directly with the Ewald gradient. The
    particle-field and field-field double integrals use the punctured
    trapezoid rule on an ``m``-grid (the kernel is bounded but direction
    dependent at the diagonal, whose node is dropped); for particle-field
    terms the grid is translated so that it passes through ``x_i``.
    Lattice symmetry cancels the leading diagonal error for divergence-free
    ``v``.
    """
    x = _positions(positions)
    mu = _mu(mu)
    N, d = x.shape
    h = 1.0 / m
    # lattice kernel K[n] = grad g(h n), zero at n = 0
    n = sf.grid_coords(m, d).reshape(-1, d)
    K = np.zeros((m**d, d))
    K[1:] = eval_grad_g(n[1:])
    K = K.reshape((m,) * d + (d,))
    Khat = [np.fft.fftn(K[..., a]) for a in range(d)]

    def conv(a, f):
        # sum_y K_a(x - y) f(y) h^d over the grid
        return np.fft.ifftn(Khat[a] * np.fft.fftn(f)).real * h**d

    vs = np.stack([sf.resample(c, m).samples() for c in v], axis=-1)
    ms = sf.resample(mu, m).samples()
    # field-field: int int (v(x) - v(y)).K(x - y) mu(x) mu(y)
    ff = 0.0
    for a in range(d):
        ff += float(np.sum(ms * vs[..., a] * conv(a, ms))) * h**d
        ff -= float(np.sum(ms * conv(a, vs[..., a] * ms))) * h**d
    # particle-field: int (v(x_i) - v(y)).K(x_i - y) mu(y) dy on a grid through x_i
    Kflat = K.reshape(-1, d)
    pf = 0.0
    for i in range(N):
        vi = sf.evaluate_at(v, x[i:i + 1])[0]
        # grid y = x_i + h n; K(x_i - y) = K(-h n)
        vy = np.stack([_shifted_samples(c, x[i], m) for c in v], axis=-1).reshape(-1, d)
        my = _shifted_samples(mu, x[i], m).reshape(-1)
        Kneg = -Kflat  # grad g is odd
        pf += float(np.sum(np.sum((vi[None, :] - vy) * Kneg, axis=1) * my)) * h**d
    # particle pairs
    pp = 0.0
    if N > 1:
        vx = sf.evaluate_at(v, x)
        for i in range(N):
            others = np.arange(N) != i
            gg = eval_grad_g(x[i] - x[others])
            pp += float(np.sum((vx[i] - vx[others]) * gg))
    return pp / N**2 - 2.0 * pf / N + ff


def commutator_bound_check(v, positions, mu, epsilon_cap, C=None):
    """``|commutator| <= C |grad v|_inf (|F_N| + |ln eps|/N + (1 + |mu|_inf) eps^2)``."""
    C = _constant("com", C)
    x = _positions(positions)
    N, d = x.shape
    mu = _mu(mu)
    lhs = abs(commutator_lhs(v, x, mu))
    grad_inf = sf.grid_norms(v).lip
    F = F_N(x, mu)
    err = abs(F) + _mect_error(N, d, epsilon_cap, mu)
    rhs = C * grad_inf * err
    ratio = lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else math.inf)
    return BoundCheck(lhs, rhs, C, {"ratio": ratio, "grad_inf": grad_inf, "F_N": F})


# ---------------------------------------------------------------------------
# time derivative of H

def _against_defect(f, x, mu):
    """``int f d(emp - mu)`` for a grid field ``f``."""
    f_c, mu_c = _common(f, mu)
    return float(np.mean(sf.evaluate_at(f, x))) - sf.pair_integral(f_c, mu_c)


def terms_1_to_4(ensemble, diag):
    """The four terms whose sum is ``dH/dt`` along coupled particle/fluid evolution.

    ``diag`` carries ``u``, ``p``, ``U`` and ``d_t p`` (see
    :func:`mfeuler.euler2d.diagnostics`).
    """
    x = ensemble.positions
    eps = ensemble.epsilon
    u, U = diag.u, diag.U
    mu = BackgroundDensity.from_corrector(U, eps).mu
    w = sf.evaluate_at(u, x) - ensemble.velocities
    J = np.stack([np.stack([sf.evaluate_at(gc, x) for gc in sf.gradient(c)], -1) for c in u], -2)
    # J[i, a, b] = d_b u^a at x_i
    term1 = -float(np.mean(np.einsum("ia,ib,iab->i", w, w, J)))
    term2 = commutator_lhs(u, x, mu) / (2 * eps**2)
    uU = VectorField(sf.multiply(*_common(c, U)) for c in u)
    flux_div = sf.divergence(VectorField(sf.inverse_laplacian(c) for c in uU))
    term3 = -_against_defect(flux_div, x, mu)
    term4 = -_against_defect(diag.dtp, x, mu)
    return term1, term2, term3, term4


# ---------------------------------------------------------------------------
# Gronwall envelope

def gronwall_rhs(H0_abs, times, c1s_norm, grad_inf, N, epsilon, C, d=2, s=0.5):
    """Right-hand side of the Gronwall estimate for ``|H(t)|`` along a norm history.

    ``(|H0| + C eps^2 int |u|_{C^{1,s}}^6 + C (1 + ln N [d=2]) / (N^{2/d} eps^2)
    int (1 + |grad u|_inf + eps^2 |grad u|_inf^2)) exp(C int (1 + |grad u|_inf))``,
    integrals by the cumulative trapezoid rule. ``s`` only labels which Hölder
    surrogate produced ``c1s_norm``.
    """
    t = np.asarray(times, dtype=float)
    c1s = np.asarray(c1s_norm, dtype=float)
    g = np.asarray(grad_inf, dtype=float)
    if t.size == 0:
        return np.zeros(0)
    if np.any(np.diff(t) < 0):
        raise ValueError("times must be nondecreasing")

    def cum(f):
        return cumulative_trapezoid(f, t, initial=0.0) if t.size > 1 else np.zeros(1)

    log_factor = 1.0 + (math.log(N) if d == 2 else 0.0)
    A = abs(H0_abs) + C * epsilon**2 * cum(c1s**6)
    A = A + C * log_factor / (N ** (2.0 / d) * epsilon**2) * cum(1 + g + epsilon**2 * g**2)
    return A * np.exp(C * cum(1 + g))
