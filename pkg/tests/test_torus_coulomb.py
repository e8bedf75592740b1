import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate
from scipy.special import j0

from mfeuler import torus_coulomb as tc
from mfeuler.torus_coulomb import (
    ConvergenceError, EwaldParams, SingularityError, c_g_eta, eval_f_eta,
    eval_g, eval_g_eta, eval_g_loc, eval_grad_f_eta, eval_grad_g,
    eval_grad_g_loc, fourier_reference_g, fourier_reference_grad_g, free_g,
    g_loc_origin, sphere_quadrature,
)

coords2 = st.lists(st.floats(-0.5, 0.5), min_size=2, max_size=2)
coords3 = st.lists(st.floats(-0.5, 0.5), min_size=3, max_size=3)


def random_displacements(rng, n, d, rmin):
    out = []
    while len(out) < n:
        x = rng.uniform(-0.5, 0.5, d)
        if np.linalg.norm(x) >= rmin:
            out.append(x)
    return np.array(out)


# closed form: g(1/2, 1/2) = -ln(2)/(4 pi) on the unit square
G_CENTER_2D = -np.log(2.0) / (4 * np.pi)


def test_center_value_closed_form():
    assert eval_g(np.array([0.5, 0.5])) == pytest.approx(G_CENTER_2D, abs=1e-12)
    assert fourier_reference_g(np.array([0.5, 0.5])) == pytest.approx(G_CENTER_2D, abs=1e-12)


@pytest.mark.parametrize("d", [2, 3])
def test_ewald_matches_fourier_reference(d):
    x = random_displacements(np.random.default_rng(10 + d), 40, d, 0.05)
    assert np.max(np.abs(eval_g(x) - fourier_reference_g(x))) < 1e-8
    assert np.max(np.abs(eval_grad_g(x) - fourier_reference_grad_g(x))) < 1e-8


@pytest.mark.parametrize("d", [2, 3])
def test_alpha_independence(d):
    x = random_displacements(np.random.default_rng(d), 100, d, 1e-3)
    a = eval_g(x)
    b = eval_g(x, EwaldParams(alpha=4.5, real_cutoff=2, recip_cutoff=14))
    assert np.max(np.abs(a - b)) < 1e-10


def test_reference_cutoff_stability():
    x = random_displacements(np.random.default_rng(5), 5, 2, 0.1)
    assert np.max(np.abs(fourier_reference_g(x, 64) - fourier_reference_g(x, 128))) < 1e-9
    x3 = random_displacements(np.random.default_rng(6), 3, 3, 0.1)
    assert np.max(np.abs(fourier_reference_g(x3, 64) - fourier_reference_g(x3, 128))) < 1e-9


def test_reference_rejects_small_cutoff():
    with pytest.raises(ConvergenceError):
        fourier_reference_g(np.array([0.06, 0.01]), mode_cutoff=4)


def test_lattice_symmetry_exact():
    assert eval_g(np.array([0.5, 0.0])) == eval_g(np.array([-0.5, 0.0]))
    assert fourier_reference_g(np.array([0.5, 0.0])) == fourier_reference_g(np.array([-0.5, 0.0]))


@settings(max_examples=30, deadline=None)
@given(coords2)
def test_even_kernel_odd_gradient(x):
    x = np.array(x)
    if np.linalg.norm(tc.minimum_image(x)) < 1e-6:
        return
    assert abs(eval_g(x) - eval_g(-x)) < 1e-12
    assert np.max(np.abs(eval_grad_g(x) + eval_grad_g(-x))) < 1e-10


@settings(max_examples=15, deadline=None)
@given(coords3)
def test_periodicity_3d(x):
    x = np.array(x)
    if np.linalg.norm(x) < 1e-3:
        return
    assert abs(eval_g(x) - eval_g(x + np.array([1.0, -2.0, 0.0]))) < 1e-11


def test_zero_displacement_raises():
    with pytest.raises(SingularityError):
        eval_g(np.zeros(2))
    with pytest.raises(SingularityError):
        eval_grad_g(np.array([1.0, 0.0]))


def test_gradient_finite_difference():
    x = np.array([0.3, 0.1])
    h = 1e-5
    fd = [(eval_g(x + h * e) - eval_g(x - h * e)) / (2 * h) for e in np.eye(2)]
    assert np.max(np.abs(eval_grad_g(x) - fd)) < 1e-6


@pytest.mark.parametrize("d", [2, 3])
def test_local_part_bounded_near_origin(d):
    e = np.ones(d) / np.sqrt(d)
    for r in [0.05, 1e-2, 1e-4, 1e-6]:
        val = eval_g(r * e) - free_g(r, d)
        assert abs(val - g_loc_origin(d)) < 5 * r
        rem = eval_grad_g(r * e) - tc.free_grad_g(r * e)
        assert np.linalg.norm(rem) < 5.0


@pytest.mark.parametrize("d", [2, 3])
def test_g_loc_origin_richardson(d):
    # removable-limit extrapolation along a ray, independent of the closed form
    e = np.ones(d) / np.sqrt(d)
    hs = [1e-2, 5e-3, 2.5e-3]
    v = [float(eval_g(h * e) - free_g(h, d)) for h in hs]
    r1 = [2 * v[i + 1] - v[i] for i in range(2)]
    extrap = (4 * r1[1] - r1[0]) / 3
    assert g_loc_origin(d) == pytest.approx(extrap, abs=1e-8)


@pytest.mark.parametrize("d", [2, 3])
def test_g_loc_gradient_fd(d):
    x = np.array([0.013, 0.02, 0.01][:d])
    h = 1e-6
    fd = [(eval_g_loc(x + h * e) - eval_g_loc(x - h * e)) / (2 * h) for e in np.eye(d)]
    assert np.max(np.abs(eval_grad_g_loc(x) - fd)) < 1e-7


def test_c_g_eta_values():
    assert c_g_eta(0.1, 2) == pytest.approx(-0.0025, rel=1e-14)
    assert c_g_eta(0.1, 3) == pytest.approx(-1 / 600, rel=1e-14)
    assert abs(c_g_eta(1e-8, 2)) < 1e-15
    with pytest.raises(ValueError):
        c_g_eta(0.3, 2)


@pytest.mark.parametrize("d", [2, 3])
def test_g_eta_continuity_and_outer_branch(d):
    eta = 0.1
    e = np.ones(d) / np.sqrt(d)
    inner = eval_g_eta(eta * (1 - 1e-10) * e, eta)
    outer = eval_g_eta(eta * (1 + 1e-10) * e, eta)
    assert abs(inner - outer) < 1e-8
    x = 2 * eta * e
    assert eval_g_eta(x, eta) == pytest.approx(eval_g(x) - c_g_eta(eta, d), abs=1e-15)


def test_g_eta_zero_mean_on_grid():
    m, eta = 256, 1.0 / 16
    s = np.arange(m) / m
    X, Y = np.meshgrid(s, s, indexing="ij")
    vals = eval_g_eta(np.stack([X, Y], axis=-1), eta)
    # g_eta is C^{1,1}, so the trapezoid error is set by the kink at |x| = eta
    assert abs(vals.mean()) < 1e-6


def test_g_zero_mean_grid_average():
    m = 512
    h = 1.0 / m
    s = np.arange(m) * h
    X, Y = np.meshgrid(s, s, indexing="ij")
    pts = np.stack([X, Y], axis=-1).reshape(-1, 2)[1:]
    total = eval_g(pts).sum() * h * h
    # exact integral of g over the singular cell: free part plus g_loc
    def wedge(th):
        R = h / 2 / np.cos(th)
        return R * R / 2 * np.log(R) - R * R / 4
    cell = -8 * integrate.quad(wedge, 0, np.pi / 4)[0] / (2 * np.pi)
    assert abs(total + cell + g_loc_origin(2) * h * h) < 1e-4


def test_f_eta_branches():
    eta = 0.1
    assert eval_f_eta(np.array([0.2, 0.0]), eta) == pytest.approx(-0.0025, abs=1e-15)
    inner = eval_f_eta(np.array([0.0, eta / 2]), eta)
    assert inner == pytest.approx(np.log(2) / (2 * np.pi) - 0.0025, abs=1e-14)


@pytest.mark.parametrize("d", [2, 3])
def test_f_eta_equals_g_minus_g_eta(d):
    eta = 0.08
    x = random_displacements(np.random.default_rng(3), 50, d, 0.01)
    assert np.max(np.abs(eval_f_eta(x, eta) - (eval_g(x) - eval_g_eta(x, eta)))) < 1e-11


def test_grad_f_eta_fd():
    eta = 0.1
    x = np.array([0.03, 0.04])
    h = 1e-6
    fd = [(eval_f_eta(x + h * e, eta) - eval_f_eta(x - h * e, eta)) / (2 * h) for e in np.eye(2)]
    assert np.max(np.abs(eval_grad_f_eta(x, eta) - fd)) < 1e-7
    assert np.all(eval_grad_f_eta(np.array([0.2, 0.0]), eta) == 0.0)


def test_f_eta_l1_scaling():
    l1, gl1 = [], []
    for eta in [1 / 16, 1 / 32, 1 / 64]:
        c = c_g_eta(eta, 2)
        inner, _ = integrate.quad(lambda r: abs(np.log(eta / r) / (2 * np.pi) + c) * 2 * np.pi * r,
                                  0, eta, limit=200)
        l1.append((inner + abs(c) * (1 - np.pi * eta**2)) / (eta**2 * abs(np.log(eta))))
        g, _ = integrate.quad(lambda r: 1 / (2 * np.pi * r) * 2 * np.pi * r, 0, eta)
        gl1.append(g / eta)
    assert max(l1) / min(l1) < 2
    assert max(gl1) / min(gl1) < 2


@pytest.mark.parametrize("d", [2, 3])
def test_sphere_quadrature_weights(d):
    pts, w = sphere_quadrature(np.full(d, 0.3), 0.1)
    assert w.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.all((pts >= 0) & (pts < 1))
    r = np.linalg.norm(tc.minimum_image(pts - 0.3), axis=-1)
    assert np.allclose(r, 0.1, atol=1e-14)


def test_sphere_quadrature_bessel():
    eta = 0.1
    pts, w = sphere_quadrature(np.zeros(2), eta)
    val = w @ np.cos(2 * np.pi * pts[:, 0])
    th = 2 * np.pi * (np.arange(10**6) + 0.5) / 10**6
    brute = np.mean(np.cos(2 * np.pi * eta * np.cos(th)))
    assert val == pytest.approx(brute, abs=1e-13)
    assert val == pytest.approx(j0(2 * np.pi * eta), abs=1e-13)


def test_sphere_quadrature_3d_exact_on_low_modes():
    # mean of exp(2 pi i k.x) over a sphere of radius eta is sinc(2 pi |k| eta)
    eta = 0.1
    pts, w = sphere_quadrature(np.zeros(3), eta)
    k = np.array([1.0, 1.0, 0.0])
    val = w @ np.cos(2 * np.pi * tc.minimum_image(pts) @ k)
    a = 2 * np.pi * np.linalg.norm(k) * eta
    assert val == pytest.approx(np.sin(a) / a, abs=1e-10)


def test_sphere_quadrature_rejects_few_nodes():
    with pytest.raises(ValueError):
        sphere_quadrature(np.zeros(2), 0.1, n_nodes=4)


def test_reference_runtime_reasonable():
    x = random_displacements(np.random.default_rng(0), 20, 3, 0.05)
    t0 = time.perf_counter()
    fourier_reference_g(x)
    assert time.perf_counter() - t0 < 10
