import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfeuler import euler2d as eu
from mfeuler import modulated_energy as me
from mfeuler import nbody as nb
from mfeuler import smearing as sm
from mfeuler import spectral_field as sf
from mfeuler import torus_coulomb as tc


@pytest.fixture(scope="module")
def tg():
    u = eu.velocity(eu.taylor_green(64))
    return u, eu.compute_U(u)


@pytest.fixture(scope="module")
def tg_mu(tg):
    return me.BackgroundDensity.from_corrector(tg[1], 0.3)


def jittered_lattice(side, seed, jitter=0.25):
    rng = np.random.default_rng(seed)
    g = np.stack(np.meshgrid(np.arange(side), np.arange(side), indexing="ij"), -1).reshape(-1, 2)
    return ((g + 0.5 + rng.uniform(-jitter, jitter, g.shape)) / side) % 1.0


# ---------------------------------------------------------------------------
# background density and F_N

def test_background_density_mean_and_reality(tg):
    mu = me.BackgroundDensity.from_corrector(tg[1], 0.5)
    assert abs(mu.mu.mean() - 1) < 1e-12
    with pytest.raises(ValueError):
        me.BackgroundDensity(tg[1] + 2.0)


def test_two_particles_uniform_background():
    x = np.array([[0.1, 0.2], [0.45, 0.8]])
    F = me.F_N(x, me.BackgroundDensity.uniform())
    assert F == pytest.approx(tc.eval_g(x[0] - x[1]) / 2, abs=1e-13)


def test_single_particle(tg_mu):
    x = np.array([[0.3, 0.6]])
    gmu = sf.convolve_g(tg_mu.mu)
    expect = -2 * sf.evaluate_at(gmu, x)[0] + sf.pair_integral(tg_mu.mu, gmu)
    assert me.F_N(x, tg_mu) == pytest.approx(expect, abs=1e-13)


def test_coincident_positions_raise():
    with pytest.raises(tc.SingularityError):
        me.F_N(np.array([[0.2, 0.2], [0.2, 0.2]]), me.BackgroundDensity.uniform())


@settings(max_examples=20, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.integers(0, 10**6))
def test_translation_invariance(a, b, seed):
    x = np.random.default_rng(seed).uniform(size=(20, 2))
    mu = me.BackgroundDensity.uniform()
    assert me.F_N(x + [a, b], mu) == pytest.approx(me.F_N(x, mu), abs=1e-10)


def test_smearing_limit_matches_three_part_expansion(tg_mu):
    # F_N = lim ||grad H_eta||^2 - (1/N^2) sum self-energies
    x = np.random.default_rng(11).uniform(size=(16, 2))
    eta = 1e-3
    E = me.smeared_field_energy(x, np.full(16, eta), tg_mu).grad_l2_sq
    approx = E - me.self_energy(eta, 2) / 16
    F = me.F_N(x, tg_mu)
    assert abs(approx - F) / abs(F) < 1e-3


def test_modulated_H_parts(tg):
    u, U = tg
    x = np.random.default_rng(2).uniform(size=(32, 2))
    ens = nb.ParticleEnsemble.from_theta(x, sf.evaluate_at(u, x), 0.5)
    br = me.modulated_H(ens, u, U)
    assert br.kinetic == 0.0
    assert br.total_H == pytest.approx(br.potential_FN / (2 * ens.epsilon**2))
    # decoupled case u = 0
    zero = sf.VectorField([sf.ScalarField.zeros(64)] * 2)
    v = np.random.default_rng(3).normal(size=(32, 2))
    ens = nb.ParticleEnsemble(x, v, 0.2)
    br = me.modulated_H(ens, zero, sf.ScalarField.zeros(64))
    expect = 0.5 * np.mean(np.sum(v**2, 1)) + me.F_N(x, me.BackgroundDensity.uniform()) / (2 * 0.04)
    assert br.total_H == pytest.approx(expect, rel=1e-13)


def test_potential_part_has_zero_mean_under_iid_sampling():
    # E F_N(x, 1) = 0 for iid uniform positions
    N = 1024
    rng = np.random.default_rng(5)
    eps2 = N ** -0.5
    mu = me.BackgroundDensity.uniform()
    vals = [me.F_N(rng.uniform(size=(N, 2)), mu) / (2 * eps2) for _ in range(40)]
    mean, se = np.mean(vals), np.std(vals, ddof=1) / math.sqrt(len(vals))
    assert abs(mean) < 3 * se


# ---------------------------------------------------------------------------
# truncation radii and smeared energies

def test_truncation_radii_examples():
    x = np.array([[0.1, 0.1], [0.5, 0.1]])
    assert np.allclose(me.truncation_radii(x, 0.05).r, 0.05)
    x = np.array([[0.1, 0.1], [0.2, 0.1]])
    assert np.allclose(me.truncation_radii(x, 0.05).r, 0.025)
    with pytest.raises(ValueError):
        me.truncation_radii(x, 0.2)


def test_truncation_radii_brute_force():
    x = np.random.default_rng(4).uniform(size=(64, 2))
    d = np.linalg.norm(tc.minimum_image(x[:, None] - x[None]), axis=-1)
    np.fill_diagonal(d, np.inf)
    assert np.array_equal(me.truncation_radii(x, 0.01).r, np.minimum(d.min(1) / 4, 0.01))


@pytest.mark.parametrize("d", [2, 3])
def test_sphere_energy_independent_of_split(d):
    x = np.random.default_rng(d).uniform(size=(12, d)) * 0.4
    eta = np.random.default_rng(d + 1).uniform(0.01, 0.1, 12)
    vals = [sm.sphere_pair_energy_sum(x, eta, alpha=a, r_cut=math.sqrt(30) / a,
                                      kmax=int(math.ceil(math.sqrt(30) * a / math.pi)))
            for a in (10.0, 16.0, 25.0)]
    assert np.ptp(vals) < 1e-11 * abs(vals[0])


@pytest.mark.parametrize("d", [2, 3])
def test_single_sphere_self_energy(d):
    for eta in (0.01, 0.05, 0.2):
        exact = sm.sphere_pair_energy_sum(np.zeros((1, d)), [eta])
        assert exact == pytest.approx(me.self_energy(eta, d), rel=1e-12)


def test_overlapping_spheres_against_full_sphere_quadrature():
    # d=3, overlapping: average the truncated potential over a (cos theta, phi) product rule
    sep, ei, ej = 0.03, 0.05, 0.03
    tk = (ei**2 - sep**2 - ej**2) / (2 * ej * sep)
    x, w = np.polynomial.legendre.leggauss(60)
    ph = 2 * np.pi * np.arange(64) / 64
    tot = 0.0
    for lo, hi in ((-1, tk), (tk, 1)):
        t = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
        T, P = np.meshgrid(t, ph, indexing="ij")
        s = np.sqrt(1 - T * T)
        pts = np.stack([sep + ej * T, ej * s * np.cos(P), ej * s * np.sin(P)], -1).reshape(-1, 3)
        tot += 0.5 * (hi - lo) * np.sum(w[:, None] * tc.eval_g_eta(pts, ei).reshape(T.shape)) / 64
    assert sm.sphere_pair_energy([0, 0, 0], [sep, 0, 0], ei, ej) == pytest.approx(tot / 2, abs=1e-12)


def test_series_and_trapezoid_routes_agree():
    rng = np.random.default_rng(3)
    a = 20.0
    z, ei, ej = rng.uniform(0, 0.4, 300), rng.uniform(0, 0.12, 300), rng.uniform(0, 0.12, 300)
    ok = (a * (ei + ej)) ** 2 <= 6
    s1 = sm._smooth_2d_series(z[ok], ei[ok], ej[ok], a)
    s2 = sm._smooth_2d(z[ok], ei[ok], ej[ok], 2 * sm._nodes_for(a, z[ok], ei[ok], ej[ok]), a)
    assert np.max(np.abs(s1 - s2)) < 1e-13


def test_self_energy_log_scaling():
    # self-energy minus -ln(eta)/2pi tends to g_loc(0)
    gaps = [me.self_energy(eta, 2) + math.log(eta) / (2 * math.pi) - tc.g_loc_origin(2)
            for eta in (1e-2, 1e-3)]
    assert abs(gaps[1]) < abs(gaps[0]) and abs(gaps[1]) < 1e-6


def test_two_separated_particles_small_radius():
    x = np.array([[0.2, 0.3], [0.6, 0.75]])
    mu = me.BackgroundDensity.uniform()
    eta = 1e-3
    E = me.smeared_field_energy(x, [eta, eta], mu).grad_l2_sq
    expect = me.F_N(x, mu) + 2 * me.self_energy(eta, 2) / 4
    assert E == pytest.approx(expect, abs=1e-6)


def test_lattice_neutrality():
    mu = me.BackgroundDensity.uniform()
    vals = []
    for side in (4, 8, 16):
        x = jittered_lattice(side, 0, jitter=0.0)
        E = me.smeared_field_energy(x, np.full(side * side, 0.25 / side), mu).grad_l2_sq
        vals.append(side * side * E)
    # neutral cells cancel the logarithm, so N * energy is scale invariant
    assert np.ptp(vals) < 1e-4 * vals[0]


def test_plancherel_identity(tg_mu):
    x = jittered_lattice(4, 7)
    r = me.truncation_radii(x, me.default_epsilon_cap(16))
    exact = me.smeared_field_energy(x, r, tg_mu, m=256)
    direct = me.bilinear_smeared_energy(x, r, tg_mu)
    assert exact.grad_l2_sq == pytest.approx(direct, rel=1e-10)
    # the grid field carries only the modes |k| < 128, so its Parseval sum falls short
    grid = me.grid_gradient_energy(exact.field)
    assert 0 < exact.grad_l2_sq - grid < 0.05 * exact.grad_l2_sq


def test_resolution_guard(tg_mu):
    x = np.array([[0.1, 0.1], [0.12, 0.1]])
    with pytest.raises(me.ResolutionError):
        me.smeared_field_energy(x, [0.005, 0.005], tg_mu, m=256)


# ---------------------------------------------------------------------------
# commutator

def test_commutator_constant_field_vanishes(tg_mu):
    one = sf.ScalarField.zeros(64) + 1.0
    v = sf.VectorField([one, 0.5 * one])
    x = np.random.default_rng(1).uniform(size=(10, 2))
    assert abs(me.commutator_lhs(v, x, tg_mu)) < 1e-13


def test_commutator_two_particles(tg):
    u = tg[0]
    x = np.array([[0.1, 0.7], [0.55, 0.3]])
    val = me.commutator_lhs(u, x, me.BackgroundDensity.uniform())
    vx = sf.evaluate_at(u, x)
    expect = (vx[0] - vx[1]) @ tc.eval_grad_g(x[0] - x[1]) / 2
    assert val == pytest.approx(expect, abs=1e-12)


def test_commutator_permutation_symmetry(tg, tg_mu):
    x = np.random.default_rng(8).uniform(size=(20, 2))
    a = me.commutator_lhs(tg[0], x, tg_mu)
    b = me.commutator_lhs(tg[0], x[::-1], tg_mu)
    assert a == pytest.approx(b, abs=1e-14)


def test_commutator_brute_force(tg, tg_mu):
    x = np.random.default_rng(21).uniform(size=(16, 2))
    a = me.commutator_lhs(tg[0], x, tg_mu)
    b = me.commutator_brute_force(tg[0], x, tg_mu, m=256)
    assert abs(a - b) / abs(a) < 1e-6


def test_commutator_bound_degenerate_for_constant_field(tg_mu):
    one = sf.ScalarField.zeros(64) + 1.0
    v = sf.VectorField([one, one])
    x = np.random.default_rng(1).uniform(size=(10, 2))
    chk = me.commutator_bound_check(v, x, tg_mu, 0.05, C=1.0)
    # grad v = 0 makes the right side vanish; the left side is zero up to roundoff
    assert chk.rhs == 0.0 and chk.lhs < 1e-13


# ---------------------------------------------------------------------------
# bounds with calibrated constants

def test_melb_single_particle(tg_mu):
    chk = me.melb_check(np.array([[0.3, 0.3]]), tg_mu, [0.05])
    assert chk.lhs == 0.0 and chk.holds


def test_melb_clustered_pair_stress(tg_mu):
    x = np.random.default_rng(3).uniform(size=(64, 2))
    x[1] = x[0] + [1e-4, 0]
    eta = np.full(64, 0.01)
    chk = me.melb_check(x, tg_mu, eta)
    assert chk.lhs > 1e-4 and chk.holds


def test_nonnegativity_corollary():
    C = me._constant("melb", None)
    mu = me.BackgroundDensity.uniform()
    rng = np.random.default_rng(9)
    N = 256
    eta = np.full(N, me.default_epsilon_cap(N))
    slack = C * np.sum(np.abs(np.log(eta))) / N**2 + C * 2 * np.sum(eta**2) / N
    for _ in range(100):
        assert me.F_N(rng.uniform(size=(N, 2)), mu) + slack >= 0


def test_mect_both_bounds(tg_mu):
    x = np.random.default_rng(12).uniform(size=(64, 2))
    ect, si = me.mect_check(x, tg_mu, me.default_epsilon_cap(64))
    assert ect.holds and si.holds


def test_sobolev_constant_and_lattice(tg_mu):
    one = sf.ScalarField.zeros(64) + 1.0
    x = jittered_lattice(8, 0, jitter=0.0)
    assert me.sobolev_dual_bound(one, x, tg_mu, 0.05).lhs < 1e-14
    phi = sf.ScalarField.from_function(lambda y: np.cos(2 * np.pi * y[..., 0]), 64)
    chk = me.sobolev_dual_bound(phi, x, me.BackgroundDensity.uniform(), 0.05)
    assert chk.lhs < 1e-12 and chk.rhs > 1e3 * chk.lhs


# ---------------------------------------------------------------------------
# terms and Gronwall envelope

def test_terms_monokinetic_and_steady(tg):
    st0 = eu.EulerState(0.0, eu.taylor_green(64))
    diag = eu.diagnostics(st0)
    x = np.random.default_rng(1).uniform(size=(64, 2))
    ens = nb.ParticleEnsemble.from_theta(x, sf.evaluate_at(diag.u, x), 0.5)
    t1, t2, t3, t4 = me.terms_1_to_4(ens, diag)
    assert t1 == 0.0 and abs(t4) < 1e-12


def test_derivative_identity_short():
    st0 = eu.EulerState(0.0, eu.taylor_green(64))
    u0 = eu.velocity(st0.omega)
    ens = nb.sample_initial(nb.InitialDataSpec(rng_seed=3), 64, 0.5, u0=u0)
    ens = nb.Integrator(ens, 1e-3).run(50)
    st = eu.EulerState(ens.time, st0.omega)

    def H(e, s):
        d = eu.diagnostics(s)
        return me.modulated_H(e, d.u, d.U).total_H

    h = 1e-4
    fd = (H(nb.leapfrog_step(ens, h), eu.step(st, h)) - H(nb.leapfrog_step(ens, -h), eu.step(st, -h))) / (2 * h)
    total = sum(me.terms_1_to_4(ens, eu.diagnostics(st)))
    assert abs(fd - total) < 1e-3 * abs(fd)


def test_gronwall_trivial_and_closed_form():
    t = np.linspace(0, 0.5, 51)
    assert me.gronwall_rhs(0.0, [0.0], [0.0], [0.0], 256, 0.25, 1.0)[0] == 0.0
    g0, c0, C, N, eps, H0 = 2.0, 3.0, 0.7, 256, 0.25, 0.1
    rhs = me.gronwall_rhs(H0, t, np.full_like(t, c0), np.full_like(t, g0), N, eps, C)
    B = C * eps**2 * c0**6 + C * (1 + math.log(N)) / (N * eps**2) * (1 + g0 + eps**2 * g0**2)
    expect = (H0 + B * t) * np.exp(C * (1 + g0) * t)
    assert np.allclose(rhs, expect, rtol=1e-13)


def test_gronwall_monotone_along_taylor_green():
    st0 = eu.EulerState(0.0, eu.taylor_green(64))
    ts, c1s, gi = [], [], []
    s = st0
    for k in range(5):
        u = eu.velocity(s.omega)
        ts.append(s.t)
        c1s.append(sf.holder_surrogate(u))
        gi.append(sf.grid_norms(u).lip)
        s = eu.advance(s, 1e-3, 20)
    rhs = me.gronwall_rhs(0.01, ts, c1s, gi, 256, 0.25, 0.5)
    assert np.all(np.diff(rhs) >= 0)
