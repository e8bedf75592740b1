"""Periodic Coulomb potential on the unit torus [0, 1)^d, d in {2, 3}.

The potential ``g`` is the zero-mean Green's function of ``-Laplacian`` with
Fourier coefficients ``1 / (4 pi^2 |k|^2)`` at the modes ``2 pi k``, k != 0, so
that ``-Lap g = delta_0 - 1`` with a unit-volume background.

Two independent evaluation routes are provided:

* :func:`eval_g` / :func:`eval_grad_g` use Ewald splitting (screened image sum
  plus a Gaussian-damped reciprocal lattice sum).
* :func:`fourier_reference_g` sums the lattice series directly, doing the sum
  along one axis in closed form so the remaining sum converges exponentially.

Displacements are plain arrays of shape ``(..., d)``; every function reduces
them to the minimum image first.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import erf, erfc, exp1

EULER_GAMMA = 0.57721566490153286061


class SingularityError(ValueError):
    """Raised when a kernel is evaluated at a zero displacement."""


class ConvergenceError(RuntimeError):
    """Raised when a truncated lattice sum cannot meet its tolerance."""


@dataclass(frozen=True)
class EwaldParams:
    """Splitting width and cutoffs for the single-displacement Ewald sum.

    ``alpha`` is measured in inverse box lengths. ``real_cutoff`` is the number
    of image shells per axis and ``recip_cutoff`` the radius of the retained
    reciprocal modes.
    """

    alpha: float = 6.0
    real_cutoff: int = 2
    recip_cutoff: int = 16

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.real_cutoff < 1 or self.recip_cutoff < 1:
            raise ValueError("cutoffs must be >= 1")


DEFAULT_EWALD = EwaldParams()


def minimum_image(x):
    """Representative of ``x`` mod 1 in [-1/2, 1/2)^d."""
    x = np.asarray(x, dtype=float)
    return x - np.floor(x + 0.5)


def wrap(x):
    """Reduce positions to [0, 1)^d."""
    x = np.asarray(x, dtype=float)
    y = x - np.floor(x)
    # floor can round a tiny negative up to exactly 1.0
    return np.where(y >= 1.0, 0.0, y)


def check_eta(eta):
    eta = float(eta)
    if not 0.0 < eta < 0.25:
        raise ValueError(f"smearing scale must lie in (0, 1/4), got {eta}")
    return eta


def _dim(x):
    d = np.shape(x)[-1]
    if d not in (2, 3):
        raise ValueError(f"dimension must be 2 or 3, got {d}")
    return d


def _nonzero(x):
    r = np.linalg.norm(x, axis=-1)
    if np.any(r == 0.0):
        raise SingularityError("Coulomb kernel evaluated at zero displacement")
    return r


# ---------------------------------------------------------------------------
# free-space kernel

def free_g(r, d):
    """Whole-space Coulomb kernel as a function of the radius."""
    r = np.asarray(r, dtype=float)
    if d == 2:
        return -np.log(r) / (2 * np.pi)
    if d == 3:
        return 1.0 / (4 * np.pi * r)
    raise ValueError(f"dimension must be 2 or 3, got {d}")


def free_grad_g(x):
    """Gradient of the whole-space kernel, ``-x / (|B_1| d |x|^d)``."""
    x = np.asarray(x, dtype=float)
    d = _dim(x)
    r = _nonzero(x)[..., None]
    if d == 2:
        return -x / (2 * np.pi * r**2)
    return -x / (4 * np.pi * r**3)


def ein(z):
    """Entire exponential integral ``Ein(z) = E1(z) + gamma + ln z``."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    small = z <= 2.0
    zs = z[small]
    term = zs.copy()
    acc = zs.copy()
    for n in range(2, 40):
        term = -term * zs * (n - 1) / (n * n)
        acc = acc + term
    out[small] = acc
    zl = z[~small]
    out[~small] = exp1(zl) + EULER_GAMMA + np.log(zl)
    return out


# ---------------------------------------------------------------------------
# Ewald sum

@lru_cache(maxsize=32)
def _recip_table(d, alpha, kmax):
    ks = np.arange(-kmax, kmax + 1)
    grids = np.meshgrid(*([ks] * d), indexing="ij")
    k2 = sum(g * g for g in grids).astype(float)
    with np.errstate(divide="ignore"):
        coef = np.exp(-np.pi**2 * k2 / alpha**2) / (4 * np.pi**2 * k2)
    coef[k2 == 0] = 0.0
    coef[k2 > kmax**2] = 0.0
    coef.setflags(write=False)
    return ks, coef


def _phases(x, ks):
    # per-axis factors exp(2 pi i k x_a), shape (P, d, K)
    return np.exp(2j * np.pi * x[:, :, None] * ks[None, None, :])


def _contract(E, C):
    """sum_k C[k] prod_a E[p, a, k_a] for d = 2 or 3."""
    d = E.shape[1]
    if d == 2:
        return np.einsum("pa,ab,pb->p", E[:, 0], C, E[:, 1], optimize=True)
    K = C.shape[0]
    t = (E[:, 0] @ C.reshape(K, K * K)).reshape(-1, K, K)
    t = np.einsum("pbc,pb->pc", t, E[:, 1])
    return np.einsum("pc,pc->p", t, E[:, 2])


def _recip_sum(x, params, grad=False, chunk=4096):
    d = x.shape[1]
    ks, coef = _recip_table(d, params.alpha, params.recip_cutoff)
    kgrid = np.meshgrid(*([ks] * d), indexing="ij")
    out = np.empty((x.shape[0], d)) if grad else np.empty(x.shape[0])
    for s in range(0, x.shape[0], chunk):
        E = _phases(x[s:s + chunk], ks)
        if grad:
            for a in range(d):
                out[s:s + chunk, a] = _contract(E, coef * (2j * np.pi * kgrid[a])).real
        else:
            out[s:s + chunk] = _contract(E, coef).real
    return out


def _image_shifts(d, shells):
    rng = range(-shells, shells + 1)
    return np.array(list(itertools.product(rng, repeat=d)), dtype=float)


def _screened(r, d, alpha):
    if d == 2:
        return exp1((alpha * r) ** 2) / (4 * np.pi)
    return erfc(alpha * r) / (4 * np.pi * r)


def _screened_dr(r, d, alpha):
    # radial derivative of the screened kernel
    if d == 2:
        return -np.exp(-(alpha * r) ** 2) / (2 * np.pi * r)
    return -(erfc(alpha * r) / r**2
             + 2 * alpha / np.sqrt(np.pi) * np.exp(-(alpha * r) ** 2) / r) / (4 * np.pi)


def _screened_smooth(r, d, alpha):
    """Screened kernel minus the free kernel; smooth through r = 0."""
    r = np.asarray(r, dtype=float)
    if d == 2:
        return (-EULER_GAMMA - 2 * np.log(alpha) + ein((alpha * r) ** 2)) / (4 * np.pi)
    out = np.full(r.shape, -alpha / (2 * np.pi**1.5))
    nz = r > 0
    out[nz] = -erf(alpha * r[nz]) / (4 * np.pi * r[nz])
    return out


def _screened_smooth_grad(x, alpha):
    d = x.shape[-1]
    r2 = np.sum(x * x, axis=-1)
    if d == 2:
        with np.errstate(invalid="ignore", divide="ignore"):
            f = -np.expm1(-(alpha**2) * r2) / (2 * np.pi * r2)
        f = np.where(r2 < 1e-300, alpha**2 / (2 * np.pi), f)
        return f[..., None] * x
    r = np.sqrt(r2)
    with np.errstate(invalid="ignore", divide="ignore"):
        f = (erf(alpha * r) / r**3
             - 2 * alpha / np.sqrt(np.pi) * np.exp(-(alpha * r) ** 2) / r2) / (4 * np.pi)
    f = np.where(r < 1e-6, alpha**3 / (3 * np.pi**1.5), f)
    return f[..., None] * x


def _flat(x):
    x = minimum_image(x)
    d = _dim(x)
    return x.reshape(-1, d), x.shape[:-1], d


def eval_g(x, params=DEFAULT_EWALD):
    """Periodic Coulomb potential at displacement(s) ``x`` via Ewald splitting."""
    xf, shape, d = _flat(x)
    _nonzero(xf)
    val = _recip_sum(xf, params) - 1.0 / (4 * params.alpha**2)
    for n in _image_shifts(d, params.real_cutoff):
        val += _screened(np.linalg.norm(xf + n, axis=-1), d, params.alpha)
    return val.reshape(shape)


def eval_grad_g(x, params=DEFAULT_EWALD):
    """Gradient of :func:`eval_g`."""
    xf, shape, d = _flat(x)
    _nonzero(xf)
    out = _recip_sum(xf, params, grad=True)
    for n in _image_shifts(d, params.real_cutoff):
        y = xf + n
        r = np.linalg.norm(y, axis=-1)
        out += (_screened_dr(r, d, params.alpha) / r)[:, None] * y
    return out.reshape(shape + (d,))


def eval_g_loc(x, params=DEFAULT_EWALD):
    """Smooth remainder ``g - g_free`` (minimum image), finite at the origin."""
    xf, shape, d = _flat(x)
    val = _recip_sum(xf, params) - 1.0 / (4 * params.alpha**2)
    for n in _image_shifts(d, params.real_cutoff):
        y = xf + n
        r = np.linalg.norm(y, axis=-1)
        if not n.any():
            val += _screened_smooth(r, d, params.alpha)
        else:
            val += _screened(r, d, params.alpha)
    return val.reshape(shape)


def eval_grad_g_loc(x, params=DEFAULT_EWALD):
    xf, shape, d = _flat(x)
    out = _recip_sum(xf, params, grad=True)
    for n in _image_shifts(d, params.real_cutoff):
        y = xf + n
        if not n.any():
            out += _screened_smooth_grad(y, params.alpha)
        else:
            r = np.linalg.norm(y, axis=-1)
            out += (_screened_dr(r, d, params.alpha) / r)[:, None] * y
    return out.reshape(shape + (d,))


@lru_cache(maxsize=4)
def g_loc_origin(d):
    """``g_loc(0)``, the regular part of the potential at the singularity."""
    return float(eval_g_loc(np.zeros((1, d)))[0])


# ---------------------------------------------------------------------------
# truncation and smearing

def c_g_eta(eta, d):
    """Mean of the truncated potential: ``-eta^2/4`` (d=2), ``eta^2(1/d-1/2)/(d-2)``."""
    eta = check_eta(eta)
    if d == 2:
        return -(eta**2) / 4
    if d == 3:
        return eta**2 * (1.0 / d - 0.5) / (d - 2)
    raise ValueError(f"dimension must be 2 or 3, got {d}")


def eval_g_eta(x, eta, params=DEFAULT_EWALD):
    """Zero-mean truncated potential: ``g`` outside ``B(0, eta)``, flattened inside."""
    eta = check_eta(eta)
    xf, shape, d = _flat(x)
    r = np.linalg.norm(xf, axis=-1)
    out = np.empty(r.shape)
    outer = r >= eta
    if outer.any():
        out[outer] = eval_g(xf[outer], params)
    if (~outer).any():
        out[~outer] = free_g(eta, d) + eval_g_loc(xf[~outer], params)
    return (out - c_g_eta(eta, d)).reshape(shape)


def eval_f_eta(x, eta, params=DEFAULT_EWALD):
    """``g - g_eta``: the constant ``c_{g,eta}`` outside the ball, log/power bump inside."""
    eta = check_eta(eta)
    xf, shape, d = _flat(x)
    r = _nonzero(xf)
    c = c_g_eta(eta, d)
    out = np.where(r >= eta, c, free_g(np.minimum(r, eta), d) - free_g(eta, d) + c)
    return out.reshape(shape)


def eval_grad_f_eta(x, eta):
    """``grad g_free(x) 1_{|x| <= eta}``."""
    eta = check_eta(eta)
    xf, shape, d = _flat(x)
    r = _nonzero(xf)
    out = free_grad_g(xf) * (r <= eta)[:, None]
    return out.reshape(shape + (d,))


DEFAULT_SPHERE_NODES = {2: 64, 3: 86}
_LEBEDEV_DEGREE = {6: 3, 14: 5, 26: 7, 38: 9, 50: 11, 74: 13, 86: 15, 110: 17,
                   146: 19, 170: 21, 194: 23, 230: 25, 266: 27, 302: 29, 350: 31,
                   434: 35, 590: 41, 770: 47, 974: 53, 1202: 59, 1454: 65}


def sphere_quadrature(center, eta, n_nodes=None):
    """Nodes and weights of the uniform probability measure on ``dB(center, eta)``.

    d=2 uses equispaced angles (exact for trigonometric polynomials of degree
    < n_nodes on the circle); d=3 uses a Lebedev rule, so ``n_nodes`` must be
    one of the Lebedev sizes (86 by default, degree 15).
    """
    eta = check_eta(eta)
    center = np.asarray(center, dtype=float)
    d = _dim(center)
    if n_nodes is None:
        n_nodes = DEFAULT_SPHERE_NODES[d]
    if n_nodes < 8:
        raise ValueError("sphere quadrature needs at least 8 nodes")
    if d == 2:
        th = 2 * np.pi * np.arange(n_nodes) / n_nodes
        unit = np.stack([np.cos(th), np.sin(th)], axis=-1)
        w = np.full(n_nodes, 1.0 / n_nodes)
    else:
        from scipy.integrate import lebedev_rule

        if n_nodes not in _LEBEDEV_DEGREE:
            raise ValueError(f"no Lebedev rule with {n_nodes} nodes")
        pts, w = lebedev_rule(_LEBEDEV_DEGREE[n_nodes])
        unit = pts.T
        w = w / w.sum()
    return wrap(center + eta * unit), w


# ---------------------------------------------------------------------------
# Fourier oracle
#
# The lattice Z^d is split into lines w + Z v along a primitive direction v.
# Along each line the sum of exp(2 pi i k.x) / |k|^2 has a closed form, so only
# the sum over lines (indexed by their distance b from the origin) is
# truncated, and it decays like exp(-2 pi b dist(v.x, Z) / |v|).

def _directions(d):
    vs = [v for v in itertools.product((-1, 0, 1), repeat=d) if any(v)]
    # keep one of each +/- pair
    vs = [v for v in vs if v[next(i for i in range(d) if v[i])] > 0]
    return [np.array(v) for v in vs]


@lru_cache(maxsize=64)
def _line_cosets(v, cutoff):
    """Representatives w (0 <= w.v < |v|^2) of lines w + Z v with 0 < b <= cutoff."""
    v = np.array(v)
    d = v.size
    v2 = int(v @ v)
    span = cutoff + 2
    ks = np.arange(-span, span + 1)
    out_w, out_a, out_b = [], [], []
    for k1 in ks:
        rest = np.meshgrid(*([ks] * (d - 1)), indexing="ij")
        k = np.stack([np.full(rest[0].size, k1)] + [r.ravel() for r in rest], axis=-1)
        kv = k @ v
        keep = (kv >= 0) & (kv < v2)
        k, kv = k[keep], kv[keep]
        a = kv / v2
        b2 = np.sum(k * k, axis=-1) - kv**2 / v2
        keep = (b2 > 1e-9) & (b2 <= cutoff**2)
        out_w.append(k[keep])
        out_a.append(a[keep])
        out_b.append(np.sqrt(b2[keep]))
    w = np.concatenate(out_w).astype(float)
    return w, np.concatenate(out_a), np.concatenate(out_b)


def _line_sum(a, beta, t, deriv=False):
    """sum_n exp(2 pi i n t) / ((n + a)^2 + beta^2) for t in [0, 1), and its t-derivative."""
    z = np.exp(2j * np.pi * a - 2 * np.pi * beta)
    A = np.exp((-2j * np.pi * a - 2 * np.pi * beta) * t) / (1 - np.conj(z))
    B = np.exp(2j * np.pi * a - 2 * np.pi * beta) * np.exp((-2j * np.pi * a + 2 * np.pi * beta) * t) / (1 - z)
    s = (np.pi / beta) * (A + B)
    if not deriv:
        return s
    ds = (np.pi / beta) * ((-2j * np.pi * a - 2 * np.pi * beta) * A
                           + (-2j * np.pi * a + 2 * np.pi * beta) * B)
    return s, ds


def _tail_estimate(d, cutoff, delta, vnorm):
    # lines with b > cutoff: about 2|v| (d=2) or 2 pi b |v| (d=3) of them per unit b,
    # each bounded by 2 pi / (b |v|) exp(-2 pi b delta)
    lam = 2 * np.pi * delta
    if d == 2:
        tail = 4 * np.pi / cutoff * np.exp(-lam * cutoff) / lam
    else:
        tail = 4 * np.pi**2 * np.exp(-lam * cutoff) * (1 / lam + 1 / (lam**2 * cutoff))
    return tail / (4 * np.pi**2) / (1 - np.exp(-lam))


def _fourier_reference(x, mode_cutoff, tol, grad):
    xf, shape, d = _flat(x)
    r = np.linalg.norm(xf, axis=-1)
    if np.any(r == 0.0):
        raise SingularityError("Coulomb kernel evaluated at zero displacement")
    dirs = _directions(d)
    vals = np.empty((len(xf), d)) if grad else np.empty(len(xf))
    for p, xp in enumerate(xf):
        # pick the line direction with the fastest transverse decay
        best = None
        for v in dirs:
            t = float(v @ xp) % 1.0
            delta = min(t, 1.0 - t) / np.sqrt(v @ v)
            if best is None or delta > best[0]:
                best = (delta, v, t)
        delta, v, t = best
        v2 = float(v @ v)
        if delta == 0.0 or _tail_estimate(d, mode_cutoff, delta, np.sqrt(v2)) > tol:
            raise ConvergenceError(
                f"mode cutoff {mode_cutoff} leaves an estimated tail above {tol:g} at x={xp}")
        w, a, b = _line_cosets(tuple(int(c) for c in v), int(mode_cutoff))
        beta = b / np.sqrt(v2)
        phase = np.exp(2j * np.pi * (w @ xp))
        if not grad:
            total = 2 * np.pi**2 * (t * t - t + 1.0 / 6.0)
            total += np.sum(phase * _line_sum(a, beta, t)).real
            vals[p] = total / (4 * np.pi**2 * v2)
        else:
            s, ds = _line_sum(a, beta, t, deriv=True)
            gvec = 2 * np.pi**2 * (2 * t - 1) * v.astype(float)
            gvec += (w.T @ (2j * np.pi * phase * s)).real
            gvec += np.sum(phase * ds).real * v
            vals[p] = gvec / (4 * np.pi**2 * v2)
    return vals.reshape(shape + ((d,) if grad else ()))


def fourier_reference_g(x, mode_cutoff=64, tol=1e-9):
    """Lattice-sum evaluation of ``g``, independent of the Ewald route.

    The modes are grouped into lines parallel to a short lattice direction; each
    line is summed in closed form and lines at distance greater than
    ``mode_cutoff`` from the origin are dropped. Raises :class:`ConvergenceError`
    when the estimated dropped tail exceeds ``tol``.
    """
    return _fourier_reference(x, mode_cutoff, tol, grad=False)


def fourier_reference_grad_g(x, mode_cutoff=64, tol=1e-9):
    return _fourier_reference(x, mode_cutoff, tol, grad=True)
