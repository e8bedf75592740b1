"""Coulomb energy of particles smeared uniformly over small spheres.

For a smeared measure ``nu = (1/N) sum_i sigma_i`` (``sigma_i`` the uniform
probability on the sphere of radius ``eta_i`` about ``x_i``) and a band-limited
background density ``mu``,

    int |grad H|^2 = int int g d(nu - mu)^2,   H = g * (nu - mu).

The sphere-sphere energies ``W_ij = int int g d sigma_i d sigma_j`` are split
like an Ewald sum: a Gaussian-damped reciprocal series (sphere transforms are
J0 in d=2 and sinc in d=3) plus a short-range part done per pair. The
short-range kernel ``G_alpha = g_free + R_alpha`` is integrated in two pieces:
the free kernel by Newton's theorem (the sphere mean of ``g_free`` at offset
``w`` is ``g_free(max(|w|, eta))``), the smooth remainder ``R_alpha`` by
quadrature. Nothing here depends on a grid, so arbitrarily small radii are
handled exactly.
"""
from __future__ import annotations

import math

import numba
import numpy as np
from scipy.special import erf, j0

from . import spectral_field as sf
from .torus_coulomb import EULER_GAMMA, ein, free_g, minimum_image, wrap


class ResolutionError(ValueError):
    """Raised when a grid is too coarse for the requested smearing radii."""


def sphere_transform(kn, eta, d):
    """Fourier transform of the uniform sphere measure at ``|k| = kn``."""
    a = 2 * np.pi * kn * eta
    if d == 2:
        return j0(a)
    return np.sinc(a / np.pi)


def _split_params(N, d):
    # short cutoff for many particles keeps the per-pair work small
    r_cut = min(0.49, max(0.08, 2.5 / math.sqrt(N))) if d == 2 else 0.45
    alpha = math.sqrt(30.0) / r_cut
    kmax = int(math.ceil(math.sqrt(30.0) * alpha / math.pi))
    return alpha, r_cut, kmax


def _R_alpha(r2, d, alpha):
    """Screened kernel minus the free kernel, as a function of r^2 (smooth at 0)."""
    if d == 2:
        return (-EULER_GAMMA - 2 * np.log(alpha) + ein(alpha**2 * r2)) / (4 * np.pi)
    r = np.sqrt(r2)
    out = np.full(r.shape, -alpha / (2 * np.pi**1.5))
    nz = r > 1e-12
    out[nz] = -erf(alpha * r[nz]) / (4 * np.pi * r[nz])
    return out


@numba.njit(cache=True)
def _ein_scalar(z):
    # series below 2, continued fraction for E1 above (Lentz)
    if z > 45.0:
        return EULER_GAMMA + math.log(z)
    if z <= 2.0:
        term = z
        acc = z
        for n in range(2, 40):
            term = -term * z * (n - 1) / (n * n)
            acc += term
        return acc
    b = z + 1.0
    c = 1e300
    dd = 1.0 / b
    h = dd
    for i in range(1, 200):
        an = -i * i
        b += 2.0
        dd = 1.0 / (an * dd + b)
        c = b + an / c
        delta = c * dd
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h * math.exp(-z) + EULER_GAMMA + math.log(z)


@numba.njit(cache=True)
def _smooth_2d(zr, ei, ej, nodes, alpha):
    out = np.empty(zr.size)
    a2 = alpha * alpha
    const = -EULER_GAMMA - 2.0 * math.log(alpha)
    for p in range(zr.size):
        n = nodes[p]
        z, a, b = zr[p], ei[p], ej[p]
        cs = np.cos(2.0 * math.pi * np.arange(n) / n)
        sn = np.sin(2.0 * math.pi * np.arange(n) / n)
        acc = 0.0
        for s in range(n):
            w1 = z + a * cs[s]
            w2 = a * sn[s]
            for q in range(n):
                dx = w1 - b * cs[q]
                dy = w2 - b * sn[q]
                acc += _ein_scalar(a2 * (dx * dx + dy * dy))
        out[p] = (const + acc / (n * n)) / (4.0 * math.pi)
    return out


def _smooth_2d_series(zr, ei, ej, alpha, n_terms=60):
    """Double circle mean of ``R_alpha`` by the mean-value series.

    ``Lap R_alpha`` is the Gaussian ``(alpha^2/pi) exp(-alpha^2 r^2)`` and
    ``Lap^k exp(-a r^2) = (-4a)^k k! L_k(a r^2) exp(-a r^2)`` in the plane, so
    averaging over circles of radii ``a, b`` gives
    ``R(z) + (1/4pi) sum_n (-1)^{n-1} (n-1)! D_n L_{n-1}(x) e^{-x}`` with
    ``x = alpha^2 z^2`` and ``D_n = sum_{j+k=n} u^j v^k / (j! k!)^2``.
    """
    u = (alpha * ei) ** 2
    v = (alpha * ej) ** 2
    x = (alpha * zr) ** 2
    ex = np.exp(-x)
    out = _R_alpha(zr * zr, 2, alpha)
    # pu[j] = u^j / j!^2
    pu = [np.ones_like(u)]
    pv = [np.ones_like(v)]
    L_prev, L = np.zeros_like(x), np.ones_like(x)  # L_{-1}, L_0
    fact = 1.0  # (n-1)!
    for n in range(1, n_terms):
        pu.append(pu[-1] * u / n**2)
        pv.append(pv[-1] * v / n**2)
        D = sum(pu[j] * pv[n - j] for j in range(n + 1))
        term = (-1) ** (n - 1) * fact * D * L * ex / (4 * np.pi)
        out = out + term
        if np.all(np.abs(term) < 1e-18):
            break
        # advance to L_n and n!
        L_prev, L = L, ((2 * n - 1 - x) * L - (n - 1) * L_prev) / n
        fact *= n
    return out


def _phi3(s, alpha):
    return s * erf(alpha * s) + np.exp(-(alpha * s) ** 2) / (alpha * np.sqrt(np.pi))


def _gauss(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return x, w


def _nodes_for(alpha, zr, ei, ej):
    # Fourier modes of the angular integrand decay like I_n(c) e^{-c}
    c = 2 * alpha**2 * np.maximum(ei, ej) * (zr + ei + ej)
    return (12 + 2 * np.ceil(c + 4 * np.sqrt(c))).astype(np.int64)


def _log_part(zr, ei, ej, d, n_gl=64):
    """Sphere-sphere mean of the free kernel for centre distances ``zr``."""
    out = free_g(np.maximum(zr, 1e-300), d)
    overlap = zr < ei + ej
    if not overlap.any():
        return out
    zo, io, jo = zr[overlap], ei[overlap], ej[overlap]
    x, w = _gauss(n_gl)
    vals = np.empty(zo.shape)
    for p in range(zo.size):
        z, a, b = zo[p], io[p], jo[p]
        if z == 0.0:
            vals[p] = free_g(max(a, b), d)
            continue
        # |w|^2 = z^2 + a^2 + 2 a z t, t = cos(theta); kink where |w| = b
        tk = (b * b - z * z - a * a) / (2 * a * z)
        if d == 2:
            # average over theta in [0, pi]
            cuts = [0.0, np.pi]
            if -1.0 < tk < 1.0:
                cuts = [0.0, np.arccos(tk), np.pi]
            acc = 0.0
            for lo, hi in zip(cuts[:-1], cuts[1:]):
                th = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
                rho = np.sqrt(np.maximum(z * z + a * a + 2 * a * z * np.cos(th), 0.0))
                acc += 0.5 * (hi - lo) * np.sum(w * free_g(np.maximum(rho, b), 2))
            vals[p] = acc / np.pi
        else:
            cuts = [-1.0, 1.0]
            if -1.0 < tk < 1.0:
                cuts = [-1.0, tk, 1.0]
            acc = 0.0
            for lo, hi in zip(cuts[:-1], cuts[1:]):
                t = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
                rho = np.sqrt(np.maximum(z * z + a * a + 2 * a * z * t, 0.0))
                acc += 0.5 * (hi - lo) * np.sum(w * free_g(np.maximum(rho, b), 3))
            vals[p] = acc / 2
    out[overlap] = vals
    return out


def _smooth_part(zr, ei, ej, d, alpha):
    """Sphere-sphere mean of ``R_alpha``; trapezoid in angles (d=2) or GL in cos(theta) (d=3)."""
    n_all = _nodes_for(alpha, zr, ei, ej)
    if d == 2:
        out = np.empty(zr.shape)
        ser = (alpha * (ei + ej)) ** 2 <= 6.0
        out[ser] = _smooth_2d_series(zr[ser], ei[ser], ej[ser], alpha)
        q = ~ser
        if q.any():
            out[q] = _smooth_2d(zr[q], ei[q], ej[q], n_all[q], alpha)
        return out
    out = np.empty(zr.shape)
    for n in np.unique(n_all):
        sel = np.nonzero(n_all == n)[0]
        for chunk in np.array_split(sel, max(1, sel.size * n * n // 2_000_000 + 1)):
            z, a, b = zr[chunk, None], ei[chunk, None], ej[chunk, None]
            if d == 2:
                th = 2 * np.pi * np.arange(n) / n
                # offset w = z e1 + a e(th1); second sphere averaged over th2
                w1 = z + a * np.cos(th)[None, :]
                w2 = a * np.sin(th)[None, :]
                c2, s2 = np.cos(th), np.sin(th)
                dx = w1[:, :, None] - b[:, :, None] * c2[None, None, :]
                dy = w2[:, :, None] - b[:, :, None] * s2[None, None, :]
                out[chunk] = _R_alpha(dx * dx + dy * dy, 2, alpha).mean(axis=(1, 2))
            else:
                t, wt = _gauss(int(n))
                wn = np.sqrt(np.maximum(z * z + a * a + 2 * a * z * t[None, :], 0.0))
                hi = wn + b
                lo = np.abs(wn - b)
                with np.errstate(invalid="ignore", divide="ignore"):
                    inner = -(_phi3(hi, alpha) - _phi3(lo, alpha)) / (8 * np.pi * b * wn)
                small = wn < 1e-9
                if small.any():
                    inner = np.where(small, _R_alpha(np.broadcast_to(b * b, wn.shape), 3, alpha), inner)
                out[chunk] = 0.5 * np.sum(wt[None, :] * inner, axis=1)
    return out


def _near_pairs(x, eta, reach):
    """All (i, j, image) with |x_i - x_j + n| < reach + eta_i + eta_j, including i = j."""
    N, d = x.shape
    if reach + 2 * eta.max() < 0.5:
        # only the minimum image can be that close
        I, J, dist = [], [], []
        step = max(1, 2_000_000 // N)
        for s in range(0, N, step):
            diff = minimum_image(x[s:s + step, None, :] - x[None, :, :])
            r = np.sqrt(np.sum(diff * diff, axis=-1))
            ii, jj = np.nonzero(r < reach + eta[s:s + step, None] + eta[None, :])
            I.append(ii + s)
            J.append(jj)
            dist.append(r[ii, jj])
        return np.concatenate(I), np.concatenate(J), np.concatenate(dist)
    pairs_i, pairs_j, dist = [], [], []
    shifts = np.array(np.meshgrid(*([[-1, 0, 1]] * d), indexing="ij")).reshape(d, -1).T
    for i in range(N):
        diff = x[i] - x  # raw differences in (-1, 1)
        for n in shifts:
            r = np.linalg.norm(diff + n, axis=1)
            keep = np.nonzero(r < reach + eta[i] + eta)[0]
            if keep.size:
                pairs_i.append(np.full(keep.size, i))
                pairs_j.append(keep)
                dist.append(r[keep])
    return np.concatenate(pairs_i), np.concatenate(pairs_j), np.concatenate(dist)


def _sphere_structure(x, eta, kmax, alpha):
    """``sum_k c_k |P_k|^2`` with ``P_k = sum_i J(|k| eta_i) exp(-2 pi i k.x_i)`` over ``0 < |k| <= kmax``."""
    N, d = x.shape
    ks = np.arange(-kmax, kmax + 1)
    grids = np.meshgrid(*([ks] * d), indexing="ij")
    k2 = sum(g * g for g in grids).ravel()
    keep = np.nonzero((k2 > 0) & (k2 <= kmax**2))[0]
    idx = [g.ravel()[keep] + kmax for g in grids]
    k2 = k2[keep]
    levels, inverse = np.unique(k2, return_inverse=True)
    kn_lev = np.sqrt(levels.astype(float))
    coef = np.exp(-np.pi**2 * kn_lev**2 / alpha**2) / (4 * np.pi**2 * kn_lev**2)
    P = np.zeros(keep.size, dtype=complex)
    step = max(1, 4_000_000 // keep.size)
    for s in range(0, N, step):
        xs = x[s:s + step]
        # separable phases exp(-2 pi i k_a x_a), one table per axis
        E = np.exp(-2j * np.pi * xs[:, :, None] * ks[None, None, :])
        ph = E[:, 0, idx[0]]
        for a in range(1, d):
            ph = ph * E[:, a, idx[a]]
        J = sphere_transform(kn_lev[None, :], eta[s:s + step, None], d)[:, inverse]
        P += np.sum(J * ph, axis=0)
    return float(np.sum(coef[inverse] * np.abs(P) ** 2))


def sphere_pair_energy_sum(x, eta, alpha=None, r_cut=None, kmax=None):
    """``sum_{i,j} int int g d sigma_i d sigma_j`` (all ordered pairs, self terms included)."""
    x = wrap(np.asarray(x, dtype=float))
    eta = np.asarray(eta, dtype=float)
    N, d = x.shape
    a0, rc0, k0 = _split_params(N, d)
    alpha = a0 if alpha is None else alpha
    r_cut = rc0 if r_cut is None else r_cut
    kmax = k0 if kmax is None else kmax
    recip = _sphere_structure(x, eta, kmax, alpha)
    # short-range part
    I, J, zr = _near_pairs(x, eta, r_cut)
    ei, ej = eta[I], eta[J]
    real = float(np.sum(_log_part(zr, ei, ej, d)) + np.sum(_smooth_part(zr, ei, ej, d, alpha)))
    return recip + real - N * N / (4 * alpha**2)


def sphere_pair_energy(x_i, x_j, eta_i, eta_j):
    """``int int g d sigma_i d sigma_j`` for one pair (or a self term when the centres coincide)."""
    x = np.array([x_i, x_j], dtype=float)
    d = x.shape[1]
    if np.array_equal(x[0], x[1]) and eta_i == eta_j:
        return sphere_pair_energy_sum(x[:1], [eta_i])
    total = sphere_pair_energy_sum(x, [eta_i, eta_j])
    return 0.5 * (total - sphere_pair_energy_sum(x[:1], [eta_i]) - sphere_pair_energy_sum(x[1:], [eta_j]))


def mu_sphere_means(x, eta, mu):
    """``int (g * mu) d sigma_i`` for every particle, exact for band-limited ``mu``."""
    x = np.asarray(x, dtype=float)
    d = x.shape[1]
    c = sf.convolve_g(mu).coeffs
    nz = np.nonzero(np.abs(c) > 1e-15 * np.max(np.abs(c), initial=0.0))
    if nz[0].size == 0:
        return np.zeros(len(x))
    k = sf.wavenumbers(mu.m)
    kv = np.stack([k[idx] for idx in nz], axis=-1)
    kn = np.linalg.norm(kv, axis=1)
    cv = c[nz]
    out = np.empty(len(x))
    step = max(1, 4_000_000 // kv.shape[0])
    for s in range(0, len(x), step):
        ph = np.exp(2j * np.pi * (x[s:s + step] @ kv.T))
        J = sphere_transform(kn[None, :], np.asarray(eta)[s:s + step, None], d)
        out[s:s + step] = np.sum(cv * J * ph, axis=1).real
    return out


def mu_energy(mu):
    """``int int g mu mu`` = sum_k |mu_k|^2 / (4 pi^2 |k|^2)."""
    return sf.pair_integral(mu, sf.convolve_g(mu))


def smeared_energy(x, eta, mu):
    """``int |grad H|^2`` for ``H = g * ((1/N) sum_i sigma_i - mu)``."""
    N = len(x)
    nu_nu = sphere_pair_energy_sum(x, eta) / N**2
    cross = np.mean(mu_sphere_means(x, eta, mu))
    return nu_nu - 2 * cross + mu_energy(mu)


def smeared_potential_field(x, eta, mu, m):
    """The potential ``H`` on an ``m``-grid; needs ``m >= max(64, 4 / min eta)``."""
    x = np.asarray(x, dtype=float)
    eta = np.asarray(eta, dtype=float)
    need = max(64, 4.0 / eta.min())
    if m < need:
        raise ResolutionError(f"grid m={m} does not resolve radius {eta.min():.3g}; need m >= {need:.0f}")
    N, d = x.shape
    k = sf.wavenumbers(m)
    grids = np.meshgrid(*([k] * d), indexing="ij")
    kn = np.sqrt(sum(g * g for g in grids))
    nu = np.zeros((m,) * d, dtype=complex)
    for i in range(N):
        ph = np.ones((m,) * d, dtype=complex)
        for a in range(d):
            ph = ph * np.exp(-2j * np.pi * grids[a] * x[i, a])
        nu += sphere_transform(kn, eta[i], d) * ph
    nu /= N
    mu_c = sf.resample(mu, m).coeffs if mu.m != m else mu.coeffs
    return sf.convolve_g(sf.ScalarField(nu - mu_c))
