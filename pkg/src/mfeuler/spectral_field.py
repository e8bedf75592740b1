"""Periodic fields on the unit torus stored as Fourier coefficients.

A :class:`ScalarField` with ``m`` nodes per axis holds ``c_k`` such that
``f(x) = sum_k c_k exp(2 pi i k.x)`` with ``k`` in FFT ordering, i.e. the
coefficients are ``fftn(samples) / m**d``. Physical fields are real, so the
coefficients are Hermitian; values are always taken as real parts.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np


def wavenumbers(m):
    """Integer wavenumbers of an ``m``-point FFT axis, in FFT order."""
    return np.fft.fftfreq(m, 1.0 / m)


def grid_coords(m, d=2):
    """Node coordinates, shape ``(m,)*d + (d,)``."""
    s = np.arange(m) / m
    return np.stack(np.meshgrid(*([s] * d), indexing="ij"), axis=-1)


@dataclass(frozen=True)
class ScalarField:
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        if c.ndim not in (1, 2, 3) or len(set(c.shape)) != 1:
            raise ValueError("coefficient array must be square with 1 to 3 axes")
        if c.shape[0] < 8:
            raise ValueError("grids need at least 8 nodes per axis")
        object.__setattr__(self, "coeffs", c)

    @property
    def m(self):
        return self.coeffs.shape[0]

    @property
    def d(self):
        return self.coeffs.ndim

    @classmethod
    def from_samples(cls, samples):
        samples = np.asarray(samples, dtype=float)
        return cls(np.fft.fftn(samples) / samples.size)

    @classmethod
    def from_function(cls, func, m, d=2):
        """Sample ``func(x)`` (x of shape ``(..., d)``) on the ``m``-grid."""
        return cls.from_samples(func(grid_coords(m, d)))

    @classmethod
    def zeros(cls, m, d=2):
        return cls(np.zeros((m,) * d, dtype=complex))

    def samples(self):
        return np.fft.ifftn(self.coeffs).real * self.coeffs.size

    def mean(self):
        return float(self.coeffs.flat[0].real)

    def wavevectors(self):
        k = wavenumbers(self.m)
        return np.meshgrid(*([k] * self.d), indexing="ij")

    def __add__(self, other):
        if isinstance(other, ScalarField):
            return ScalarField(self.coeffs + other.coeffs)
        c = self.coeffs.copy()
        c.flat[0] += other
        return ScalarField(c)

    def __sub__(self, other):
        return self + (-1.0) * other

    def __mul__(self, a):
        if isinstance(a, ScalarField):
            return multiply(self, a)
        return ScalarField(self.coeffs * a)

    __rmul__ = __mul__

    def __neg__(self):
        return ScalarField(-self.coeffs)

    def __call__(self, points):
        return evaluate_at(self, points)


class VectorField(tuple):
    """Tuple of ``d`` :class:`ScalarField` components."""

    def __new__(cls, components):
        comps = tuple(components)
        if len({(c.m, c.d) for c in comps}) != 1:
            raise ValueError("components must share one grid")
        return super().__new__(cls, comps)

    @property
    def m(self):
        return self[0].m

    @property
    def d(self):
        return len(self)

    def samples(self):
        return np.stack([c.samples() for c in self], axis=-1)

    def __call__(self, points):
        return evaluate_at(self, points)


# ---------------------------------------------------------------------------
# spectral operators

def _k2(f):
    return sum(k * k for k in f.wavevectors())


def laplacian(f):
    return ScalarField(-4 * np.pi**2 * _k2(f) * f.coeffs)


def inverse_laplacian(f):
    """``(-Lap)^{-1}`` on zero-mean fields; the k=0 input coefficient is discarded."""
    k2 = _k2(f)
    with np.errstate(divide="ignore", invalid="ignore"):
        c = f.coeffs / (4 * np.pi**2 * k2)
    c.flat[0] = 0.0
    return ScalarField(c)


def convolve_g(f):
    """Convolution with the periodic Coulomb potential (same multiplier as inverse_laplacian)."""
    return inverse_laplacian(f)


def _odd_wavevectors(f):
    # first derivatives drop the Nyquist mode so real fields stay real
    k = wavenumbers(f.m)
    if f.m % 2 == 0:
        k[f.m // 2] = 0.0
    return np.meshgrid(*([k] * f.d), indexing="ij")


def gradient(f):
    return VectorField(ScalarField(2j * np.pi * k * f.coeffs) for k in _odd_wavevectors(f))


def divergence(v):
    ks = _odd_wavevectors(v[0])
    return ScalarField(sum(2j * np.pi * k * c.coeffs for k, c in zip(ks, v)))


def perp_gradient(f):
    """``(d_2 f, -d_1 f)`` in two dimensions."""
    g1, g2 = gradient(f)
    return VectorField((g2, -g1))


def pair_integral(f, g):
    """``int f g dx`` by Parseval."""
    return float(np.sum(f.coeffs * np.conj(g.coeffs)).real)


def dealias_mask(m, d=2):
    """Two-thirds rule: keep modes with every ``|k_i| < m/3``."""
    k = np.abs(wavenumbers(m))
    keep = k < m / 3.0
    out = keep
    for _ in range(d - 1):
        out = np.multiply.outer(out, keep)
    return out


def dealias(f):
    return ScalarField(f.coeffs * dealias_mask(f.m, f.d))


def resample(f, m_new):
    """Zero-pad or truncate the coefficient array to ``m_new`` nodes per axis.

    A Nyquist coefficient is split symmetrically when padding so that the
    padded field equals the real part of the original series.
    """
    m, d = f.m, f.d
    if m_new == m:
        return f
    c = f.coeffs
    if m_new > m:
        half = m // 2
        c = c.copy()
        # split the Nyquist plane into +m/2 and -m/2 halves
        idx = np.arange(-half, half + 1)
        src = np.where(np.abs(idx) == half, -half, idx) % m
        for ax in range(d):
            c = np.take(c, src, axis=ax)
            scale = np.where(np.abs(idx) == half, 0.5, 1.0)
            shape = [1] * d
            shape[ax] = idx.size
            c = c * scale.reshape(shape)
        out = np.zeros((m_new,) * d, dtype=complex)
        dst = np.ix_(*([idx % m_new] * d))
        out[dst] = c
        return ScalarField(out)
    half = m_new // 2
    keep = np.r_[0:half, m - half:m]
    out = c[np.ix_(*([keep] * d))].copy()
    return ScalarField(out)


def multiply(f, g):
    """Product projected onto the grid modes (alias-free via 2x padding)."""
    m = f.m
    fs = resample(f, 2 * m).samples()
    gs = resample(g, 2 * m).samples()
    return resample(ScalarField.from_samples(fs * gs), m)


def evaluate_at(f, points):
    """Evaluate the trigonometric series at arbitrary points, shape ``(P, d)``."""
    if isinstance(f, VectorField):
        return np.stack([evaluate_at(c, points) for c in f], axis=-1)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    d = f.d
    if pts.shape[-1] != d:
        raise ValueError("point dimension does not match the field")
    k = wavenumbers(f.m)
    E = np.exp(2j * np.pi * pts[:, :, None] * k[None, None, :])
    if f.m % 2 == 0:
        # Nyquist mode as the real cosine, i.e. split evenly between +-m/2
        E[:, :, f.m // 2] = np.cos(np.pi * f.m * pts)
    if d == 1:
        vals = E[:, 0] @ f.coeffs
    elif d == 2:
        vals = np.einsum("pa,pa->p", E[:, 0] @ f.coeffs, E[:, 1])
    else:
        t = (E[:, 0] @ f.coeffs.reshape(f.m, -1)).reshape(-1, f.m, f.m)
        t = np.einsum("pbc,pb->pc", t, E[:, 1])
        vals = np.einsum("pc,pc->p", t, E[:, 2])
    out = vals.real
    return out if np.ndim(points) > 1 else out[0]


def oversampled(f, factor=4):
    return resample(f, factor * f.m).samples()


@dataclass(frozen=True)
class GridNorms:
    l2: float
    linf: float
    lip: float


def grid_norms(f, factor=4):
    """L^2 by Parseval; L^inf and the Lipschitz seminorm as oversampled-grid maxima."""
    if isinstance(f, VectorField):
        l2 = np.sqrt(sum(np.sum(np.abs(c.coeffs) ** 2) for c in f))
        vals = np.stack([oversampled(c, factor) for c in f], axis=-1)
        linf = np.max(np.linalg.norm(vals, axis=-1))
        jac = np.stack([np.stack([oversampled(gc, factor) for gc in gradient(c)], -1) for c in f], -2)
        lip = np.max(np.linalg.norm(jac, ord=2, axis=(-2, -1)))
        return GridNorms(float(l2), float(linf), float(lip))
    l2 = np.sqrt(np.sum(np.abs(f.coeffs) ** 2))
    linf = np.max(np.abs(oversampled(f, factor)))
    grad = np.stack([oversampled(c, factor) for c in gradient(f)], axis=-1)
    lip = np.max(np.linalg.norm(grad, axis=-1))
    return GridNorms(float(l2), float(linf), float(lip))


def holder_surrogate(u, s=0.5, factor=4):
    """Computable stand-in for the C^{1,s} norm of a vector field.

    ``||u||_inf + ||grad u||_inf`` plus the largest difference quotient
    ``|grad u(x + h e_a) - grad u(x)| / h^s`` over dyadic axis offsets on the
    oversampled grid.
    """
    norms = grid_norms(u, factor)
    jac = np.stack([np.stack([oversampled(gc, factor) for gc in gradient(c)], -1) for c in u], -2)
    M = jac.shape[0]
    q = 0.0
    step = 1
    while step <= M // 4:
        h = step / M
        for ax in range(u.d):
            diff = np.roll(jac, -step, axis=ax) - jac
            q = max(q, float(np.max(np.linalg.norm(diff, axis=(-2, -1)))) / h**s)
        step *= 2
    return norms.linf + norms.lip + q


# ---------------------------------------------------------------------------
# serialization

def write_binary(f, path_or_buf):
    """int64 LE d, int64 LE m, then float64 LE physical samples in row-major order."""
    data = struct.pack("<qq", f.d, f.m) + np.ascontiguousarray(f.samples(), dtype="<f8").tobytes()
    if hasattr(path_or_buf, "write"):
        path_or_buf.write(data)
    else:
        with open(path_or_buf, "wb") as fh:
            fh.write(data)


def read_binary(path_or_buf):
    if hasattr(path_or_buf, "read"):
        data = path_or_buf.read()
    else:
        with open(path_or_buf, "rb") as fh:
            data = fh.read()
    d, m = struct.unpack_from("<qq", data)
    samples = np.frombuffer(data, dtype="<f8", offset=16, count=m**d).reshape((m,) * d)
    return ScalarField.from_samples(samples)


def write_csv(f, path):
    """One row per leading-index slice of the physical samples (small grids only)."""
    s = f.samples().reshape(-1, f.m)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["d", f.d, "m", f.m])
        for row in s:
            w.writerow([repr(float(v)) for v in row])


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    d, m = int(rows[0][1]), int(rows[0][3])
    s = np.array([[float(v) for v in r] for r in rows[1:]]).reshape((m,) * d)
    return ScalarField.from_samples(s)
