"""Pseudo-spectral 2D incompressible Euler solver in vorticity form.

The state is the vorticity ``omega = d_1 u_2 - d_2 u_1``; the velocity is
recovered by Biot-Savart, ``u = (d_2 psi, -d_1 psi)`` with
``psi = (-Lap)^{-1} omega``, so it is divergence free by construction.
Time stepping is classical RK4 on ``d_t omega = -u . grad omega`` with the
two-thirds rule applied to the advection term.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import spectral_field as sf
from .spectral_field import ScalarField, VectorField


class CFLError(RuntimeError):
    """Raised when a step would exceed the CFL limit ``u_max dt m <= 0.5``."""


CFL_LIMIT = 0.5


@dataclass(frozen=True)
class EulerState:
    t: float
    omega: ScalarField

    @property
    def m(self):
        return self.omega.m


@dataclass(frozen=True)
class EulerDiagnostics:
    u: VectorField
    p: ScalarField
    U: ScalarField
    dtp: ScalarField


class _Spectral:
    """Real-FFT wavenumber tables for one grid size."""

    def __init__(self, m):
        self.m = m
        kx = np.fft.fftfreq(m, 1.0 / m)
        ky = np.fft.rfftfreq(m, 1.0 / m)
        self.kx, self.ky = np.meshgrid(kx, ky, indexing="ij")
        k2 = self.kx**2 + self.ky**2
        k2[0, 0] = 1.0
        self.inv_lap = 1.0 / (4 * np.pi**2 * k2)
        self.inv_lap[0, 0] = 0.0
        kxo = np.where(np.abs(self.kx) == m // 2, 0.0, self.kx)
        kyo = np.where(np.abs(self.ky) == m // 2, 0.0, self.ky)
        self.ikx = 2j * np.pi * kxo
        self.iky = 2j * np.pi * kyo
        self.mask = (np.abs(self.kx) < m / 3.0) & (np.abs(self.ky) < m / 3.0)

    def velocity_hat(self, w_hat):
        psi = w_hat * self.inv_lap
        return self.iky * psi, -self.ikx * psi

    def rhs(self, w_hat):
        m = self.m
        u1h, u2h = self.velocity_hat(w_hat)
        u1 = np.fft.irfft2(u1h, s=(m, m))
        u2 = np.fft.irfft2(u2h, s=(m, m))
        wx = np.fft.irfft2(self.ikx * w_hat, s=(m, m))
        wy = np.fft.irfft2(self.iky * w_hat, s=(m, m))
        adv = np.fft.rfft2(u1 * wx + u2 * wy)
        out = -adv * self.mask
        out[0, 0] = 0.0
        return out

    def umax(self, w_hat):
        m = self.m
        u1h, u2h = self.velocity_hat(w_hat)
        u1 = np.fft.irfft2(u1h, s=(m, m))
        u2 = np.fft.irfft2(u2h, s=(m, m))
        return float(np.sqrt(np.max(u1 * u1 + u2 * u2)))


_TABLES = {}


def _tables(m):
    if m not in _TABLES:
        _TABLES[m] = _Spectral(m)
    return _TABLES[m]


def _to_rfft(f):
    return np.fft.rfft2(f.samples())


def _from_rfft(w_hat, m):
    return ScalarField.from_samples(np.fft.irfft2(w_hat, s=(m, m)))


def check_cfl(state, dt):
    m = state.m
    c = _tables(m).umax(_to_rfft(state.omega)) * abs(dt) * m
    if c > CFL_LIMIT:
        raise CFLError(f"CFL number {c:.3f} exceeds {CFL_LIMIT} (dt={dt}, m={m})")
    return c


def _rk4(tab, w, dt):
    k1 = tab.rhs(w)
    k2 = tab.rhs(w + 0.5 * dt * k1)
    k3 = tab.rhs(w + 0.5 * dt * k2)
    k4 = tab.rhs(w + dt * k3)
    return w + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def step(state, dt):
    """One RK4 step. Negative ``dt`` integrates backwards in time."""
    if dt == 0:
        raise ValueError("dt must be nonzero")
    check_cfl(state, dt)
    tab = _tables(state.m)
    w = _rk4(tab, _to_rfft(state.omega) * tab.mask, dt)
    w[0, 0] = 0.0
    return EulerState(state.t + dt, _from_rfft(w, state.m))


def advance(state, dt, n_steps, check_every=1):
    """``n_steps`` RK4 steps of size ``dt``; the CFL check runs every ``check_every`` steps."""
    tab = _tables(state.m)
    w = _to_rfft(state.omega) * tab.mask
    w[0, 0] = 0.0
    for n in range(n_steps):
        if n % check_every == 0:
            c = tab.umax(w) * abs(dt) * state.m
            if c > CFL_LIMIT:
                raise CFLError(f"CFL number {c:.3f} exceeds {CFL_LIMIT} at step {n}")
        w = _rk4(tab, w, dt)
    return EulerState(state.t + n_steps * dt, _from_rfft(w, state.m))


def velocity(omega):
    """Biot-Savart velocity ``(d_2 psi, -d_1 psi)``, ``psi = (-Lap)^{-1} omega``."""
    return sf.perp_gradient(sf.inverse_laplacian(omega))


def vorticity(u):
    g1 = sf.gradient(u[0])
    g2 = sf.gradient(u[1])
    return g2[0] - g1[1]


def _jacobian(u):
    # J[a][b] = d_a u^b
    grads = [sf.gradient(c) for c in u]
    return [[grads[b][a] for b in range(2)] for a in range(2)]


def compute_U(u):
    """``sum_{a,b} d_a u^b d_b u^a`` with alias-free products and zero mean."""
    J = _jacobian(u)
    out = ScalarField.zeros(u.m)
    for a in range(2):
        for b in range(2):
            out = out + sf.multiply(J[a][b], J[b][a])
    c = out.coeffs.copy()
    c.flat[0] = 0.0
    return ScalarField(c)


def pressure(u):
    """``p = (-Lap)^{-1} U``."""
    return sf.inverse_laplacian(compute_U(u))


def dt_pressure(u, p=None):
    """Time derivative of the pressure along the Euler flow.

    ``d_t p = (-Lap)^{-1} [ -2 d_a (u^c d_c u^b d_b u^a) - 2 d_a d_b p d_b u^a ]``,
    obtained by differentiating ``-Lap p = U`` and substituting
    ``d_t u = -(u.grad)u - grad p``.
    """
    if p is None:
        p = pressure(u)
    J = _jacobian(u)
    hess = [sf.gradient(g) for g in sf.gradient(p)]  # hess[a][b] = d_b d_a p
    src = ScalarField.zeros(u.m)
    for a in range(2):
        # u^c d_c u^b d_b u^a, then its a-derivative
        flux = ScalarField.zeros(u.m)
        for b in range(2):
            adv_b = sf.multiply(u[0], J[0][b]) + sf.multiply(u[1], J[1][b])
            flux = flux + sf.multiply(adv_b, J[b][a])
        src = src - 2.0 * sf.gradient(flux)[a]
        for b in range(2):
            src = src - 2.0 * sf.multiply(hess[a][b], J[b][a])
    return sf.inverse_laplacian(src)


def diagnostics(state):
    u = velocity(state.omega)
    U = compute_U(u)
    p = sf.inverse_laplacian(U)
    return EulerDiagnostics(u=u, p=p, U=U, dtp=dt_pressure(u, p))


def kinetic_energy(omega):
    """``int |u|^2 dx``."""
    return sum(float(np.sum(np.abs(c.coeffs) ** 2)) for c in velocity(omega))


def enstrophy(omega):
    return float(np.sum(np.abs(omega.coeffs) ** 2))


# ---------------------------------------------------------------------------
# initial data

def taylor_green(m):
    """Vorticity of ``u = (sin 2pi x cos 2pi y, -cos 2pi x sin 2pi y)``."""
    return ScalarField.from_function(
        lambda x: 4 * np.pi * np.sin(2 * np.pi * x[..., 0]) * np.sin(2 * np.pi * x[..., 1]), m)


def shear(m):
    """Vorticity of ``u = (cos 2pi y, 0)``."""
    return ScalarField.from_function(lambda x: 2 * np.pi * np.sin(2 * np.pi * x[..., 1]), m)


def random_bandlimited(m, seed, max_mode=8, umax=0.5):
    """Random vorticity with modes ``|k_i| <= max_mode`` and an ``|k|^{-2}``-ish spectrum.

    The result is rescaled so the peak speed on the grid is ``umax``.
    """
    if max_mode > m // 8:
        raise ValueError(f"max_mode must be <= m/8 = {m // 8}")
    rng = np.random.default_rng(seed)
    k = sf.wavenumbers(m)
    kx, ky = np.meshgrid(k, k, indexing="ij")
    band = (np.abs(kx) <= max_mode) & (np.abs(ky) <= max_mode)
    amp = np.where(band, 1.0 / (1.0 + kx**2 + ky**2), 0.0)
    c = amp * (rng.standard_normal((m, m)) + 1j * rng.standard_normal((m, m)))
    w = ScalarField.from_samples(ScalarField(c).samples())
    w = ScalarField(np.where(band, w.coeffs, 0.0))
    w = w - w.mean()
    speed = np.max(np.linalg.norm(velocity(w).samples(), axis=-1))
    return w * (umax / speed)


def initial_vorticity(preset, m, seed=0, max_mode=8):
    if preset == "taylor_green":
        return taylor_green(m)
    if preset == "shear":
        return shear(m)
    if preset == "random_bandlimited":
        return random_bandlimited(m, seed, max_mode)
    raise ValueError(f"unknown vorticity preset {preset!r}")


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(state, dt, path):
    """Text header ``t m dt`` on one line, then the binary field layout."""
    buf = io.BytesIO()
    sf.write_binary(state.omega, buf)
    with open(path, "wb") as fh:
        fh.write(f"{state.t!r} {state.m} {dt!r}\n".encode())
        fh.write(buf.getvalue())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        header = fh.readline().decode().split()
        omega = sf.read_binary(fh)
    t, m, dt = float(header[0]), int(header[1]), float(header[2])
    if omega.m != m:
        raise ValueError("checkpoint header does not match the field size")
    return EulerState(t, omega), dt
