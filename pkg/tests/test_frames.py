import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jaclab.frames import (annulus_radii, build_frame_field, dstar, embed, hd_frame, hd_sign, sphere_frame,
                           t_matrix, t_matrix_batch, tangent_fields)

from conftest import five_region_scene, two_phase_scene


def _unit(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_d2_frame_at_north_pole():
    H = sphere_frame(2, np.array([0.0, 1.0]))
    assert np.array_equal(H, [[0.0, 1.0], [-1.0, 0.0]])


def test_d4_frame_at_e1():
    H = sphere_frame(4, np.eye(4)[0])
    assert np.array_equal(H[1:], [[0, 1, 0, 0], [0, 0, -1, 0], [0, 0, 0, -1]])
    assert np.linalg.det(H) == pytest.approx(1.0)


def test_d8_frame_at_e1():
    H = sphere_frame(8, np.eye(8)[0])
    assert np.array_equal(H[1], np.eye(8)[1])


@pytest.mark.parametrize("d", [2, 4, 8])
def test_sphere_frames_orthonormal_positive(d, rng):
    x = _unit(rng, 2000, d)
    H = sphere_frame(d, x)
    assert np.array_equal(H[:, 0], x)
    assert np.abs(H @ H.transpose(0, 2, 1) - np.eye(d)).max() < 1e-12
    assert np.abs(np.linalg.det(H) - 1).max() < 1e-12


def test_hd_sign_parity():
    assert [hd_sign(d) for d in (2, 3, 4)] == [-1, -1, 1]


def test_hd_determinants_unfixed(rng):
    for d, expected in [(2, -1.0), (3, -1.0), (4, 1.0)]:
        H = hd_frame(d, _unit(rng, 200, d), sign_fix=False)
        assert np.abs(np.linalg.det(H) - expected).max() < 1e-9


@pytest.mark.parametrize("d", [3, 5, 6, 7])
def test_hd_frame_tangency_and_rank(d, rng):
    x = _unit(rng, 1000, d)
    H = hd_frame(d, x)
    tang = H[:, 1:, :d]
    assert np.abs(np.einsum("nij,nj->ni", tang, x)).max() < 1e-12
    assert np.abs(np.linalg.det(H) - 1.0).max() < 1e-9
    stack = np.concatenate([x[:, None], tang], axis=1)
    sv = np.linalg.svd(stack, compute_uv=False)
    assert np.all(np.sum(sv > 1e-10 * sv[:, :1], axis=1) == d)


def test_non_unit_input_rejected():
    with pytest.raises(ValueError):
        sphere_frame(2, np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        hd_frame(3, np.array([1.0, 0.0, 1e-3]))


def test_dstar_and_tangent_fields():
    assert [dstar(d) for d in (2, 3, 4, 8)] == [2, 4, 4, 8]
    assert tangent_fields(3, np.array([0.0, 0.0, 1.0])).shape == (4, 3)


# ---------------------------------------------------------------------------
# frame field on scenes
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def field2():
    return build_frame_field(two_phase_scene())


def test_f1_is_normal_on_interface(field2):
    t = np.linspace(0, 2 * np.pi, 50, endpoint=False)
    x = 0.5 * np.c_[np.cos(t), np.sin(t)]
    F = field2(x)
    assert np.allclose(F[:, 0], x / 0.5, atol=1e-12)
    assert np.allclose(np.einsum("ni,ni->n", F[:, 0], F[:, 1]), 0, atol=1e-12)


def test_identity_outside_annuli(field2):
    lo, hi = annulus_radii(0.5, two_phase_scene().d0)
    x = np.array([[0.0, 0.0], [0.1, -0.05], [0.9, 0.1], [-0.2, 0.95 * 0.5 + hi]])
    x = x[(np.hypot(*x.T) < lo) | (np.hypot(*x.T) > hi)]
    assert np.allclose(field2(x), np.eye(2))


@pytest.mark.parametrize("scene_fn", [two_phase_scene, five_region_scene])
def test_frame_field_rank_on_verification_grid(scene_fn):
    scene = scene_fn()
    field = build_frame_field(scene)
    g = np.linspace(-1, 1, 256)
    X, Y = np.meshgrid(g, g)
    pts = np.c_[X.ravel(), Y.ravel()]
    pts = pts[scene.region_of(pts) > 0]
    F = field(pts)
    assert np.abs(np.linalg.det(F)).min() >= 1e-6
    assert np.allclose(np.linalg.norm(F[:, 0], axis=1), 1.0)


def test_sampled_lipschitz_within_bound(field2):
    assert field2.sampled_lipschitz(n_pairs=10000) <= field2.lipschitz_bound() * (1 + 1e-9)


# ---------------------------------------------------------------------------
# current matrix
# ---------------------------------------------------------------------------

def test_t_matrix_standard_basis():
    T = t_matrix(np.eye(2), np.zeros(2), embed(np.eye(2)))
    assert np.linalg.matrix_rank(T) == 3


def test_t_matrix_zero_xi():
    T = t_matrix(np.eye(2), np.array([0.3, -0.1]), embed(np.zeros((2, 2))))
    assert np.linalg.matrix_rank(T) == 1


def test_t_matrix_parallel_xi():
    v = np.array([0.6, -0.8])
    T = t_matrix(np.eye(2), np.array([0.2, 0.5]), embed(np.array([v, -2.5 * v])))
    assert np.linalg.matrix_rank(T) == 2


def _rank(M, tol=1e-9):
    sv = np.linalg.svd(M, compute_uv=False)
    return int(np.sum(sv > tol * max(sv[0], 1.0)))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from(["generic", "zero", "parallel", "one_zero"]))
def test_t_matrix_rank_identity_isotropic(seed, kind):
    rng = np.random.default_rng(seed)
    A = rng.uniform(0.5, 2.0) * np.eye(2)
    b = rng.normal(size=2)
    xi = rng.normal(size=(2, 2))
    if kind == "zero":
        xi[:] = 0
    elif kind == "parallel":
        xi[1] = rng.normal() * xi[0]
    elif kind == "one_zero":
        xi[int(rng.integers(2))] = 0
    T = t_matrix(A, b, embed(xi))
    assert _rank(T) == _rank(xi) + 1


def test_t_matrix_rank_identity_fails_for_anisotropic_a():
    # xi_2 parallel to A^T xi_1 while xi_1, xi_2 are independent: rank(xi) + 1 = 3 but T has rank 2
    A = np.diag([2.0, 1.0])
    xi1 = np.array([1.0, 1.0])
    xi2 = A.T @ xi1
    T = t_matrix(A, np.zeros(2), embed(np.array([xi1, xi2])))
    assert _rank(np.array([xi1, xi2])) == 2
    assert _rank(T) == 2


def test_t_matrix_batch_matches_single(rng):
    n = 20
    A = np.einsum("n,ij->nij", rng.uniform(0.5, 2, n), np.eye(2))
    b = rng.normal(size=(n, 2))
    F = rng.normal(size=(n, 2, 2))
    Tb = t_matrix_batch(A, b, F)
    for k in range(n):
        assert np.allclose(Tb[k], t_matrix(A[k], b[k], embed(F[k])))
