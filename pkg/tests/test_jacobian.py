from itertools import combinations, permutations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jaclab.coefficients import CoefficientSet, make_operator
from jaclab.frames import build_frame_field
from jaclab.jacobian import (FamilyProbe, ReductionScreen, admissibility_margin, degenerate_coefficients,
                             failure_rate, flux_jac, flux_jacobians, gradient_subfamily,
                             gradient_subfamily_matrix, jac_matrix, margin_lower_bound, minor_sum, p_star,
                             ranks, reduce_matrices, reduce_once, try_reduction, whitney_reduce)
from jaclab.solver import DirichletProblem

from conftest import cached_mesh, two_phase_coeffs

TRACES = {"x": lambda p: p[:, 0], "y": lambda p: p[:, 1], "1": lambda p: np.ones(len(p)),
          "x2-y2": lambda p: p[:, 0] ** 2 - p[:, 1] ** 2, "2xy": lambda p: 2 * p[:, 0] * p[:, 1],
          "x3": lambda p: p[:, 0] ** 3 - 3 * p[:, 0] * p[:, 1] ** 2}


def laplace_family(*names, kind="disk", h=1 / 16):
    mesh = cached_mesh(kind, h)
    n = mesh.scene.N + 1
    prob = DirichletProblem(make_operator(CoefficientSet.laplace(n)), mesh)
    return prob.solve_many([TRACES[k] for k in names], list(names))


def _minor_oracle(J):
    """Plain-python sum of |3x3 minors| over all row triples."""
    total = 0.0
    for rows in combinations(range(J.shape[0]), 3):
        total += abs(np.linalg.det(J[list(rows)]))
    return total


def test_p_star():
    assert p_star() == 5


def test_linear_family_jacobian():
    us = laplace_family("x", "y", "1")
    for x in ([0.2, -0.3], [0.0, 0.0], [-0.6, 0.5]):
        J = jac_matrix(us, np.array(x))
        assert np.allclose(J, [[1, 0, x[0]], [0, 1, x[1]], [0, 0, 1]], atol=1e-10)
        assert ranks(J[None])[0] == 3


def test_linear_family_margin_is_one():
    rep = admissibility_margin(laplace_family("x", "y", "1"))
    assert rep.admissible
    assert rep.margin == pytest.approx(1.0, abs=1e-9)
    assert np.allclose(rep.margins, 1.0, atol=1e-9)


def test_two_members_never_admissible():
    rep = admissibility_margin(laplace_family("x", "y"))
    assert not rep.admissible
    assert rep.rank.max() <= 2
    assert rep.margin == 0.0


def test_duplicate_keeps_rank_and_margin_grows():
    us = laplace_family("x", "y", "1", "x2-y2")
    probe = FamilyProbe.standard(us[0].mesh)
    base = probe.report(us)
    for k in range(4):
        dup = probe.report(us + [us[k]])
        assert np.array_equal(dup.rank, base.rank)
        assert np.all(dup.margins >= base.margins - 1e-12)


def test_four_member_margin_matches_minor_oracle():
    us = laplace_family("x", "y", "x2-y2", "1")
    rep = admissibility_margin(us)
    pick = np.random.default_rng(0).choice(rep.samples.n, 40, replace=False)
    for k in pick:
        assert rep.margins[k] == pytest.approx(_minor_oracle(rep.J[k]), rel=1e-12)
    # the triple (x, y, x^2 - y^2) is degenerate at the origin up to discretization error; the family is not
    J0 = jac_matrix(us, np.zeros(2))
    assert abs(np.linalg.det(J0[[0, 1, 2]])) < 5e-3
    assert minor_sum(J0) > 0.9
    assert rep.admissible == (rep.margins.min() > 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(3, 8))
def test_minor_sum_against_oracle(seed, P):
    J = np.random.default_rng(seed).normal(size=(5, P, 3))
    ms = minor_sum(J)
    for k in range(5):
        assert ms[k] == pytest.approx(_minor_oracle(J[k]), rel=1e-10)
    # root-sum-square of the minors never exceeds their sum
    assert np.all(margin_lower_bound(J) <= ms * (1 + 1e-9))


def test_flux_jac_identity_region():
    us = laplace_family("x2-y2", "1", kind="two_phase")
    frames = build_frame_field(us[0].mesh.scene)
    op = us[0].op
    x = np.array([0.0, 0.1])          # far from the annulus, frame is the identity
    row = flux_jac(us[0], frames, op, x, 1)
    J = jac_matrix(us, x)
    assert np.allclose(row, J[0], atol=1e-12)
    assert np.allclose(flux_jac(us[1], frames, op, x, 1), [0, 0, 1], atol=1e-10)


def test_flux_jacobian_consistency_with_t_matrix():
    mesh = cached_mesh("two_phase", 1 / 16)
    op = make_operator(two_phase_coeffs())
    us = DirichletProblem(op, mesh).solve_many([TRACES[k] for k in ("x", "y", "1", "2xy")])
    frames = build_frame_field(mesh.scene)
    rng = np.random.default_rng(1)
    r = rng.uniform(0.3, 0.7, 200)
    t = rng.uniform(0, 2 * np.pi, 200)
    pts = np.c_[r * np.cos(t), r * np.sin(t)]
    keep = np.abs(r - 0.5) > 0.02
    pts, sides = pts[keep], mesh.scene.region_of(pts[keep])
    direct = flux_jacobians(us, frames, op, pts, sides)
    via_t = flux_jacobians(us, frames, op, pts, sides, via_t=True)
    assert np.abs(direct - via_t).max() <= 1e-10


def test_forced_zero_reduction():
    us = laplace_family("x", "y", "1", "1")
    res = whitney_reduce(us, seed=0, a=np.zeros(3))
    assert len(res.fields) == 3
    assert res.steps[0].attempts == 1
    assert np.array_equal(res.fields[0].elem_values, us[0].elem_values)
    assert admissibility_margin(res.fields).admissible


def test_reduction_failure_rate_harmonic_five():
    us = laplace_family("x", "y", "x2-y2", "2xy", "1")
    J = FamilyProbe.standard(us[0].mesh).jacobians(us)
    rate, sandwich = failure_rate(J, 1000, seed=7)
    assert rate < 0.01
    assert sandwich


def test_adversarial_coefficients_rejected_then_resampled():
    us = laplace_family("x", "y", "x2-y2", "2xy", "1")
    J = FamilyProbe.standard(us[0].mesh).jacobians(us)
    k = 17
    bad = degenerate_coefficients(J[k])
    ok, margin, _ = try_reduction(J, bad)
    assert not ok and margin == 0.0
    assert ranks(reduce_matrices(J[k:k + 1], bad))[0] < 3
    step = reduce_once(J, np.random.default_rng(0), a=bad)
    assert step.attempts >= 2
    assert np.array_equal(step.rejected[0], bad)
    assert try_reduction(J, step.a)[0]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_rank_sandwich_random_projection(seed):
    rng = np.random.default_rng(seed)
    J = rng.normal(size=(50, 5, 3))
    a = rng.uniform(-1, 1, 4)
    rk = ranks(reduce_matrices(J, a))
    assert np.all((rk >= 2) & (rk <= 3))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(4, 7))
def test_screen_agrees_with_exact_reduction_test(seed, P):
    rng = np.random.default_rng(seed)
    J = rng.normal(size=(60, P, 3))
    J[:5, :, 2] = 0.7 * J[:5, :, 0]                # a few rank-2 samples
    screen = ReductionScreen(J)
    for _ in range(5):
        a = rng.uniform(-1, 1, P - 1)
        fast, exact = screen.check(a), try_reduction(J, a)
        assert fast[0] == exact[0]
        assert fast[1] == pytest.approx(exact[1], rel=1e-9, abs=1e-12)


def test_gradient_subfamily_linear():
    us = laplace_family("x", "y", "1")
    assert gradient_subfamily(us, np.array([0.1, 0.2])) == (0, 1)


def test_gradient_subfamily_permutation_consistent():
    us = laplace_family("x", "1", "x2-y2", "y")
    x = np.array([0.3, -0.2])
    chosen = {us[i].trace for i in gradient_subfamily(us, x)}
    for perm in list(permutations(range(4)))[::5]:
        sub = gradient_subfamily([us[p] for p in perm], x)
        assert {us[perm[i]].trace for i in sub} == chosen


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_full_rank_implies_nonzero_gradient_minor(seed):
    rng = np.random.default_rng(seed)
    P = int(rng.integers(3, 7))
    J = rng.normal(size=(P, 3))
    if rng.uniform() < 0.3:
        J[:, :2] = np.outer(J[:, 0], [1.0, rng.normal()])   # gradients all parallel: rank <= 2
    best = max(abs(np.linalg.det(J[list(c), :2])) for c in combinations(range(P), 2))
    if ranks(J[None])[0] < 3:
        with pytest.raises(ValueError):
            gradient_subfamily_matrix(J)
        return
    idx, det = gradient_subfamily_matrix(J)
    assert abs(det) == pytest.approx(best, rel=1e-12)
    assert best > 0
