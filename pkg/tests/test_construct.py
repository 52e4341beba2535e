import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from jaclab.coefficients import CoefficientSet, RegionCoefficients, make_operator
from jaclab.construct import (OdeSolution, RungeDictionary, ball_cover, build_admissible_family,
                              certified_radius, cover_assignment, cover_bound, gradient_only_bound,
                              local_ode_solutions, multilinear_bound, runge_fit)

from conftest import cached_mesh, two_phase_coeffs, unit_disk


def test_laplace_seed_is_linear():
    op = make_operator(CoefficientSet.laplace(1))
    x = np.array([0.2, -0.1])
    seed = local_ode_solutions(op, x, region=1)
    y = np.array([[0.3, 0.4], [-0.5, 0.0]])
    assert np.allclose(seed.values(y), np.c_[y[:, 0] - x[0], y[:, 1] - x[1], np.ones(2)], atol=1e-15)
    assert all(o.branch == "double" for o in seed.odes)


def test_shifted_laplace_seed_is_hyperbolic():
    kappa = 0.7
    op = make_operator(CoefficientSet.laplace(1), kappa=kappa)
    seed = local_ode_solutions(op, np.zeros(2), region=1)
    t = np.linspace(-0.5, 0.5, 11)
    w = math.sqrt(kappa)
    o = seed.odes[0]
    assert o.branch == "real"
    assert np.allclose(o.f(t), np.sinh(w * t) / w, atol=1e-15)
    assert np.allclose(o.g(t), np.cosh(w * t), atol=1e-15)


@pytest.mark.parametrize("a,beta,gamma", [(1.3, 0.4, 0.5), (0.9, -0.6, -2.0), (1.0, 2.0, -1.0), (2.0, 0.0, 0.0)])
def test_ode_solutions_against_numerical_integration(a, beta, gamma):
    ode = OdeSolution(a, beta, gamma)

    def rhs(t, y):
        return [y[1], (beta * y[1] + gamma * y[0]) / a]
    t = np.linspace(0, 0.8, 9)
    f = solve_ivp(rhs, (0, 0.8), [0.0, 1.0], t_eval=t, rtol=1e-12, atol=1e-14)
    g = solve_ivp(rhs, (0, 0.8), [1.0, 0.0], t_eval=t, rtol=1e-12, atol=1e-14)
    assert np.allclose(ode.f(t), f.y[0], atol=1e-9)
    assert np.allclose(ode.f(t, 1), f.y[1], atol=1e-9)
    assert np.allclose(ode.g(t), g.y[0], atol=1e-9)
    assert np.allclose(ode.g(t, 1), g.y[1], atol=1e-9)
    lhs = a * ode.f(t, 2) - beta * ode.f(t, 1) - gamma * ode.f(t)
    assert np.abs(lhs).max() < 1e-12 * max(1.0, np.abs(a * ode.f(t, 2)).max())


def _random_coefficients(rng):
    lam = 0.3
    A = rng.uniform(lam * 1.1, 1 / lam, 2)
    theta = rng.uniform(0, np.pi)
    R = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    A = R @ np.diag(A) @ R.T
    rc = RegionCoefficients(A=A, b=tuple(rng.uniform(-1, 1, 2)), c=tuple(rng.uniform(-1, 1, 2)),
                            q=float(rng.uniform(-1, 1)))
    return make_operator(CoefficientSet({1: rc}, lam), kappa=float(rng.uniform(0, 1)))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_seed_determinant_and_exactness(seed):
    rng = np.random.default_rng(seed)
    op = _random_coefficients(rng)
    x = rng.uniform(-0.5, 0.5, 2)
    s = local_ode_solutions(op, x, region=1)
    assert s.det(x[None])[0] == pytest.approx(1.0, abs=1e-10)
    y = x + rng.uniform(-0.2, 0.2, (20, 2))
    assert s.residual(y).max() <= 1e-10


def test_linear_seed_fit_is_exact():
    mesh = cached_mesh("disk", 1 / 16)
    op = make_operator(CoefficientSet.laplace(1))
    seed = local_ode_solutions(op, np.array([0.1, 0.2]), region=1)
    us, fit = runge_fit(op, mesh, seed, m=4, radius=0.4)
    assert fit.error <= 1e-8
    assert len(us) == 3


def test_fit_error_monotone_in_dictionary_size():
    mesh = cached_mesh("two_phase", 1 / 16)
    op = make_operator(two_phase_coeffs(), kappa=0.5)
    seed = local_ode_solutions(op, np.array([0.1, 0.05]), region=1)
    big = RungeDictionary(op, mesh, 32)
    errors = []
    for m in (8, 16, 32):
        dictionary = RungeDictionary(op, mesh, m)
        errors.append(runge_fit(op, mesh, seed, m, 0.3, dictionary)[1].error)
    assert errors[0] >= errors[1] * (1 - 1e-9) >= errors[2] * (1 - 1e-9)
    assert big.size == 33


def test_cover_bound_arithmetic():
    scene = unit_disk()
    assert scene.diameter == 2.0
    assert cover_bound(scene, 1.0) == 5
    for eps in (1.0, 0.5, 0.3, 0.1):
        assert cover_bound(scene, eps / 2) <= 4 * cover_bound(scene, eps) + 1


@pytest.mark.parametrize("eps", [1.0, 0.5, 0.25])
def test_ball_cover_count_and_coverage(eps):
    scene = unit_disk()
    samples = scene.grid(0.02)
    centers, owner = cover_assignment(samples, eps, scene.outer.centroid)
    assert len(centers) <= cover_bound(scene, eps)
    assert np.all(owner >= 0)
    assert np.linalg.norm(samples - centers[owner], axis=1).max() <= eps * (1 + 1e-12)
    assert len(ball_cover(scene, eps)) <= cover_bound(scene, eps)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(1e-6, 0.5))
def test_multilinear_bound_dominates_determinant_change(seed, scale):
    rng = np.random.default_rng(seed)
    U = rng.normal(size=(10, 3, 3))
    V = U + scale * rng.normal(size=(10, 3, 3))
    diff = np.abs(np.linalg.det(U) - np.linalg.det(V)).max()
    assert diff <= multilinear_bound(U, V) * (1 + 1e-12)


def test_gradient_only_bound_misses_value_column():
    # (x1, x2, 1) versus (x1, x2, 2): determinants 1 and 2, identical gradients
    x = np.array([0.3, -0.2])
    U = np.array([[[1, 0, x[0]], [0, 1, x[1]], [0, 0, 1]]], dtype=float)
    V = U.copy()
    V[0, 2, 2] = 2.0
    assert abs(np.linalg.det(U) - np.linalg.det(V))[0] == pytest.approx(1.0)
    assert gradient_only_bound(U, V) == 0.0
    assert multilinear_bound(U, V) >= 1.0


def test_certified_radius_monotone_scan():
    rng = np.random.default_rng(0)
    n = 200
    dist = rng.uniform(0, 1, n)
    U = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    V = U + (0.05 * dist)[:, None, None] * rng.normal(size=(n, 3, 3))
    eps, mask = certified_radius(dist, np.ones(n), U, V, 0.5)
    assert 0 < eps <= 1
    assert np.array_equal(mask, dist <= eps)
    inside = dist <= eps
    assert 1.0 - multilinear_bound(U[inside], V[inside]) > 0.5


def test_laplace_family_without_inclusions():
    mesh = cached_mesh("disk", 1 / 32)
    fam = build_admissible_family(mesh.scene, CoefficientSet.laplace(1, 1.0), mesh, sigma=0.5, seed=0)
    assert fam.P == 3
    assert fam.certified
    assert fam.report.margin >= 0.5
    assert fam.report.rank.min() == 3
