"""Frames on spheres, the interface-adapted frame field, and the current matrix T.

``sphere_frame`` gives the explicit orthonormal frames of S^{d-1} for
d in {2, 4, 8}; ``hd_frame`` the (d+1)x(d+1) matrix built from d tangent
fields valid in every dimension.  ``FrameField`` is the 2D Lipschitz frame
that equals the identity away from the interfaces and (normal, tangent)
on each interface circle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Scene

UNIT_TOL = 1e-12


def dstar(d: int) -> int:
    return d if d in (2, 4, 8) else d + 1


def _check_unit(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    norms = np.linalg.norm(np.atleast_2d(x), axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ValueError(f"frame evaluated at a non-unit vector (|x| = {norms.max():.16g})")
    return x


# Signed permutations of the explicit frames: _SIGNS[d][k] lists (sign, index) per component.
_FRAMES = {
    2: [
        [(+1, 0), (+1, 1)],
        [(-1, 1), (+1, 0)],
    ],
    4: [
        [(+1, 0), (+1, 1), (+1, 2), (+1, 3)],
        [(-1, 1), (+1, 0), (-1, 3), (+1, 2)],
        [(+1, 2), (-1, 3), (-1, 0), (+1, 1)],
        [(+1, 3), (+1, 2), (-1, 1), (-1, 0)],
    ],
    8: [
        [(+1, 0), (+1, 1), (+1, 2), (+1, 3), (+1, 4), (+1, 5), (+1, 6), (+1, 7)],
        [(-1, 1), (+1, 0), (-1, 3), (+1, 2), (-1, 5), (+1, 4), (+1, 7), (-1, 6)],
        [(-1, 2), (+1, 3), (+1, 0), (-1, 1), (-1, 6), (-1, 7), (+1, 4), (+1, 5)],
        [(-1, 3), (-1, 2), (+1, 1), (+1, 0), (-1, 7), (+1, 6), (-1, 5), (+1, 4)],
        [(-1, 4), (+1, 5), (+1, 6), (+1, 7), (+1, 0), (-1, 1), (-1, 2), (-1, 3)],
        [(-1, 5), (-1, 4), (+1, 7), (-1, 6), (+1, 1), (+1, 0), (+1, 3), (-1, 2)],
        [(-1, 6), (-1, 7), (-1, 4), (+1, 5), (+1, 2), (-1, 3), (+1, 0), (+1, 1)],
        [(-1, 7), (+1, 6), (-1, 5), (-1, 4), (+1, 3), (+1, 2), (-1, 1), (+1, 0)],
    ],
}


def sphere_frame(d: int, x) -> np.ndarray:
    """Orthonormal frame (h_1..h_d) at x in S^{d-1}, d in {2, 4, 8}.

    Returns a (d, d) array whose k-th row is h_{k+1}; h_1 = x.  Accepts a
    batch of points of shape (n, d), returning (n, d, d).
    """
    if d not in _FRAMES:
        raise ValueError(f"no parallelizing frame of S^{d - 1}; use hd_frame")
    x = _check_unit(x)
    batch = x.ndim == 2
    X = np.atleast_2d(x)
    if X.shape[1] != d:
        raise ValueError(f"expected points in R^{d}")
    out = np.empty((len(X), d, d))
    for k, row in enumerate(_FRAMES[d]):
        for comp, (s, idx) in enumerate(row):
            out[:, k, comp] = s * X[:, idx]
    return out if batch else out[0]


def hd_sign(d: int) -> int:
    return -1 if (d * (d + 3) // 2) % 2 else 1


def hd_frame(d: int, x, sign_fix: bool = True) -> np.ndarray:
    """(d+1)x(d+1) matrix with rows (h_1, 1), (h_2, x_d), ..., (h_{d+1}, x_1).

    h_1 = x and h_i = x * x_{d+2-i} - e_{d+2-i} for i >= 2 (tangent to the
    sphere).  With ``sign_fix`` the last row is multiplied by
    (-1)^{d(d+3)/2}, which makes the determinant +1.
    """
    x = _check_unit(x)
    batch = x.ndim == 2
    X = np.atleast_2d(x)
    n = len(X)
    if X.shape[1] != d:
        raise ValueError(f"expected points in R^{d}")
    H = np.empty((n, d + 1, d + 1))
    H[:, 0, :d] = X
    H[:, 0, d] = 1.0
    for i in range(2, d + 2):
        m = d + 2 - i  # 1-based component index
        H[:, i - 1, :d] = X * X[:, m - 1:m]
        H[:, i - 1, m - 1] -= 1.0
        H[:, i - 1, d] = X[:, m - 1]
    if sign_fix:
        H[:, d, :] *= hd_sign(d)
    return H if batch else H[0]


def tangent_fields(d: int, x) -> np.ndarray:
    """The d* frame vectors in R^d: rows h_1..h_{d*} (explicit frame or H_d's first d columns)."""
    if d in _FRAMES:
        return sphere_frame(d, x)
    H = hd_frame(d, x)
    return H[..., :, :d]


# ---------------------------------------------------------------------------
# frame field on a 2D scene
# ---------------------------------------------------------------------------

def _rot(angle: np.ndarray) -> np.ndarray:
    """Rotation matrices with columns (f1, f2); returned as (n, 2, 2) rows f1, f2."""
    c, s = np.cos(angle), np.sin(angle)
    out = np.empty((len(angle), 2, 2))
    out[:, 0, 0], out[:, 0, 1] = c, s
    out[:, 1, 0], out[:, 1, 1] = -s, c
    return out


@dataclass(frozen=True)
class Annulus:
    circle_id: int
    center: tuple[float, float]
    radius: float
    inner: float
    outer: float


class FrameField:
    """Frame (f_1, f_2) on a 2D scene.

    Inside the annulus inner < rho < outer around an interface circle of
    radius R (rho measured from its center, theta its polar angle in
    (-pi, pi]) the frame is the rotation by phi(rho) * theta, where phi is
    piecewise linear with phi(inner) = phi(outer) = 0 and phi(R) = 1.  At
    rho = R this is (normal, tangent); at both annulus edges it is the
    identity, and it is the identity outside every annulus.

    A rotation field on the annulus cannot have winding 0 on the edges and
    winding 1 on the interface, so the interpolation has a branch cut: the
    segment theta = pi with rho != R.  It is Lipschitz on the complement.
    """

    def __init__(self, scene: Scene, annuli: list[Annulus]):
        self.scene = scene
        self.annuli = annuli
        self.d = 2
        self.dstar = 2

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        """(n, 2, 2) array; [:, 0] is f_1 and [:, 1] is f_2."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        angle = np.zeros(len(pts))
        for an in self.annuli:
            v = pts - np.asarray(an.center)
            rho = np.hypot(v[:, 0], v[:, 1])
            m = (rho > an.inner) & (rho < an.outer)
            if not np.any(m):
                continue
            r = rho[m]
            phi = np.where(r <= an.radius, (r - an.inner) / (an.radius - an.inner),
                           (an.outer - r) / (an.outer - an.radius))
            angle[m] = phi * np.arctan2(v[m, 1], v[m, 0])
        return _rot(angle)

    def across_cut(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """True where the segment x -> y may cross a branch cut (both in an annulus, theta sign change near pi)."""
        x, y = np.atleast_2d(x), np.atleast_2d(y)
        out = np.zeros(len(x), dtype=bool)
        for an in self.annuli:
            c = np.asarray(an.center)
            vx, vy = x - c, y - c
            rx, ry = np.hypot(*vx.T), np.hypot(*vy.T)
            inside = ((rx > an.inner) & (rx < an.outer)) | ((ry > an.inner) & (ry < an.outer))
            left = (vx[:, 0] < 0) | (vy[:, 0] < 0)
            flip = np.sign(vx[:, 1]) != np.sign(vy[:, 1])
            out |= inside & left & flip
        return out

    def lipschitz_bound(self) -> float:
        """Analytic Lipschitz constant (Frobenius norm) of the rotation field off the branch cuts.

        The angle phi(rho) theta has gradient at most hypot(pi / w, 1 / inner)
        and |R(a) - R(b)|_F <= sqrt(2) |a - b|.
        """
        best = 0.0
        for an in self.annuli:
            radial = math.pi / min(an.radius - an.inner, an.outer - an.radius)
            angular = 1.0 / an.inner
            best = max(best, math.sqrt(2.0) * math.hypot(radial, angular))
        return best

    def sampled_lipschitz(self, n_pairs: int = 10000, delta: float = 1e-3, seed: int = 0) -> float:
        """Maximum difference quotient over random close pairs not straddling a cut."""
        rng = np.random.default_rng(seed)
        x0, y0, x1, y1 = self.scene.outer.bbox()
        x = np.c_[rng.uniform(x0, x1, n_pairs), rng.uniform(y0, y1, n_pairs)]
        step = rng.normal(size=(n_pairs, 2))
        step *= (delta * rng.uniform(0.1, 1.0, n_pairs) / np.linalg.norm(step, axis=1))[:, None]
        y = x + step
        ok = self.scene.outer.contains(x) & self.scene.outer.contains(y) & ~self.across_cut(x, y)
        fx, fy = self(x[ok]), self(y[ok])
        q = np.linalg.norm((fx - fy).reshape(ok.sum(), -1), axis=1) / np.linalg.norm(step[ok], axis=1)
        return float(q.max(initial=0.0))

    @property
    def lipschitz(self) -> float:
        return max(self.lipschitz_bound(), self.sampled_lipschitz())


def annulus_radii(radius: float, d0: float) -> tuple[float, float]:
    w = min(d0, radius) / 4.0
    return radius - w, radius + w


def build_frame_field(scene: Scene) -> FrameField:
    d0 = scene.d0 if scene.N else math.inf
    annuli = []
    for k, c in enumerate(scene.circles, start=1):
        lo, hi = annulus_radii(c.radius, d0)
        annuli.append(Annulus(k, c.center, c.radius, lo, hi))
    # annuli must be pairwise disjoint and must not reach another interface
    for a in annuli:
        for b in annuli:
            if a is b:
                continue
            dist = math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])
            lo, hi = abs(dist - b.radius), dist + b.radius
            if lo < a.outer and hi > a.inner:
                raise ValueError(f"annulus around circle {a.circle_id} touches interface {b.circle_id}")
            lo = 0.0 if b.inner < dist < b.outer else min(abs(dist - b.inner), abs(dist - b.outer))
            if lo < a.outer and dist + b.outer > a.inner:
                raise ValueError(f"annuli around circles {a.circle_id} and {b.circle_id} overlap")
    return FrameField(scene, annuli)


# ---------------------------------------------------------------------------
# current matrix
# ---------------------------------------------------------------------------

def t_matrix(A: np.ndarray, b: np.ndarray, zetas) -> np.ndarray:
    """T(x, zeta_1..zeta_{d*+1}) for coefficient values A (d x d) and b (d,) at x.

    Columns: (A^T P zeta_1 ; b . P zeta_1), (P zeta_k ; 0) for 2 <= k <= d*,
    and (P zeta_{d*+1} ; 1), where P drops the last coordinate.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    Z = np.asarray(zetas, dtype=float)
    d = A.shape[0]
    if Z.shape[1] != d + 1:
        raise ValueError("zetas must live in R^{d+1}")
    m = len(Z)
    T = np.zeros((d + 1, m))
    P = Z[:, :d]
    T[:d, 0] = A.T @ P[0]
    T[d, 0] = b @ P[0]
    for k in range(1, m):
        T[:d, k] = P[k]
    T[d, m - 1] = 1.0
    return T


def embed(xis) -> np.ndarray:
    """(xi_1..xi_{d*}) in R^d -> (E xi_1, .., E xi_{d*}, e_{d+1}) in R^{d+1}."""
    X = np.asarray(xis, dtype=float)
    d = X.shape[1]
    Z = np.zeros((len(X) + 1, d + 1))
    Z[:-1, :d] = X
    Z[-1, d] = 1.0
    return Z


def t_matrix_batch(A: np.ndarray, b: np.ndarray, frames: np.ndarray) -> np.ndarray:
    """T(x, E f_1, .., E f_{d*}, e_{d+1}) at many points.

    A: (n, d, d), b: (n, d), frames: (n, d*, d) -> (n, d+1, d*+1).
    """
    n, ds, d = frames.shape
    T = np.zeros((n, d + 1, ds + 1))
    T[:, :d, 0] = np.einsum("nji,nj->ni", A, frames[:, 0])
    T[:, d, 0] = np.einsum("ni,ni->n", b, frames[:, 0])
    T[:, :d, 1:ds] = frames[:, 1:].transpose(0, 2, 1)
    T[:, d, ds] = 1.0
    return T
