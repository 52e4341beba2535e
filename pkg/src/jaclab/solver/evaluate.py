"""One-sided pointwise evaluation of u, Du and the Laplacian of discrete fields.

Evaluation is linear in the field values, so a :class:`Sampler` stores
sparse operators acting on the element-wise value vector (length 3m) and
can be applied to many fields at once.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .mesh import Mesh

LOCATE_K = 12
PATCH_FACTOR = 2.0
MIN_PATCH_NODES = 10


class EvaluationError(ValueError):
    pass


def _region_tree(mesh: Mesh, region: int):
    key = ("centroid_tree", region)
    if key not in mesh._cache:
        elems = np.flatnonzero(mesh.region == region)
        if len(elems) == 0:
            raise EvaluationError(f"mesh has no elements in region {region}")
        cent = mesh.points[mesh.triangles[elems]].mean(axis=1)
        mesh._cache[key] = (elems, cKDTree(cent))
    return mesh._cache[key]


def _region_nodes(mesh: Mesh, region: int):
    """Node ids touched by the region, their slot in the element-wise vector, and a KD-tree."""
    key = ("node_tree", region)
    if key not in mesh._cache:
        elems = np.flatnonzero(mesh.region == region)
        slot = np.full(mesh.n_nodes, -1)
        for k in range(3):
            slot[mesh.triangles[elems, k]] = 3 * elems + k
        nodes = np.flatnonzero(slot >= 0)
        mesh._cache[key] = (nodes, slot[nodes], cKDTree(mesh.points[nodes]))
    return mesh._cache[key]


def barycentric(mesh: Mesh, elems: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of pts[i] in triangle elems[..., i]; broadcasts over a leading axis."""
    p0 = mesh.points[mesh.triangles[elems, 0]]
    G = mesh.gradients()[elems]                   # (..., 3, 2)
    lam = np.einsum("...kd,...d->...k", G, pts - p0)
    lam[..., 0] += 1.0
    return lam


def locate(mesh: Mesh, pts: np.ndarray, region: int) -> tuple[np.ndarray, np.ndarray]:
    """Element of ``region`` containing each point (or the nearest one) and barycentrics.

    Points slightly outside the region's elements (between a curved
    interface and its polygon) get the linear extension of the closest
    element, which keeps the evaluation one-sided.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    elems, tree = _region_tree(mesh, region)
    k = min(LOCATE_K, len(elems))
    _, idx = tree.query(pts, k=k)
    idx = idx.reshape(len(pts), k)
    cand = elems[idx]                              # (n, k)
    lam = barycentric(mesh, cand.T, np.broadcast_to(pts, (k,) + pts.shape)).transpose(1, 0, 2)
    score = lam.min(axis=2)                        # (n, k)
    best = np.argmax(score >= -1e-12, axis=1)
    none = ~np.any(score >= -1e-12, axis=1)
    best[none] = np.argmax(score[none], axis=1)
    rows = np.arange(len(pts))
    return cand[rows, best], lam[rows, best]


def _patch_weights(offsets: np.ndarray, scale: float) -> np.ndarray:
    """Weights w with sum_k w_k u_k = Laplacian of the least-squares quadratic through the nodes."""
    s = offsets / scale
    V = np.c_[np.ones(len(s)), s[:, 0], s[:, 1], s[:, 0] ** 2, s[:, 0] * s[:, 1], s[:, 1] ** 2]
    pinv = np.linalg.pinv(V)
    return 2.0 * (pinv[3] + pinv[5]) / scale ** 2


@dataclass
class Sampler:
    """Sparse evaluation operators at fixed points on fixed sides.

    ``value``, ``dx``, ``dy`` and ``lap`` are (n_points, 3m) matrices that map
    the element-wise value vector of a field to u, its two partial
    derivatives and its Laplacian at the points.
    """

    mesh: Mesh
    points: np.ndarray
    sides: np.ndarray
    value: sp.csr_matrix
    dx: sp.csr_matrix
    dy: sp.csr_matrix
    lap: sp.csr_matrix | None
    elements: np.ndarray

    @classmethod
    def build(cls, mesh: Mesh, pts, side="auto", laplacian: bool = False) -> "Sampler":
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        n = len(pts)
        if isinstance(side, str):
            if side != "auto":
                raise EvaluationError(f"unknown side {side!r}")
            sides = mesh.scene.region_of(pts) if mesh.scene is not None else np.ones(n, dtype=int)
        else:
            sides = np.broadcast_to(np.asarray(side, dtype=int), (n,)).copy()
        if np.any(sides == 0):
            raise EvaluationError("point outside the domain")
        present = set(np.unique(mesh.region).tolist())
        missing = set(np.unique(sides).tolist()) - present
        if missing:
            raise EvaluationError(f"side mismatch: regions {sorted(missing)} not in mesh")
        elem = np.empty(n, dtype=np.int64)
        lam = np.empty((n, 3))
        for r in np.unique(sides):
            sel = sides == r
            elem[sel], lam[sel] = locate(mesh, pts[sel], int(r))
        m3 = 3 * mesh.n_elements
        cols = 3 * elem[:, None] + np.arange(3)
        rows = np.repeat(np.arange(n), 3)
        G = mesh.gradients()[elem]
        value = sp.csr_matrix((lam.ravel(), (rows, cols.ravel())), shape=(n, m3))
        dx = sp.csr_matrix((G[:, :, 0].ravel(), (rows, cols.ravel())), shape=(n, m3))
        dy = sp.csr_matrix((G[:, :, 1].ravel(), (rows, cols.ravel())), shape=(n, m3))
        lap = cls._laplacian(mesh, pts, sides) if laplacian else None
        return cls(mesh, pts, sides, value, dx, dy, lap, elem)

    @staticmethod
    def _laplacian(mesh: Mesh, pts: np.ndarray, sides: np.ndarray) -> sp.csr_matrix:
        radius = PATCH_FACTOR * mesh.h
        rows, cols, vals = [], [], []
        for r in np.unique(sides):
            nodes, slots, tree = _region_nodes(mesh, int(r))
            for i in np.flatnonzero(sides == r):
                near = tree.query_ball_point(pts[i], radius)
                if len(near) < MIN_PATCH_NODES:
                    _, near = tree.query(pts[i], k=min(MIN_PATCH_NODES, len(nodes)))
                near = np.atleast_1d(near)
                w = _patch_weights(mesh.points[nodes[near]] - pts[i], radius)
                rows.append(np.full(len(near), i))
                cols.append(slots[near])
                vals.append(w)
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(len(pts), 3 * mesh.n_elements))

    @staticmethod
    def _stack(fields) -> np.ndarray:
        if hasattr(fields, "elem_values"):
            return fields.elem_values.reshape(-1)
        return np.stack([f.elem_values.reshape(-1) for f in fields], axis=1)

    def values(self, fields) -> np.ndarray:
        return self.value @ self._stack(fields)

    def gradients(self, fields) -> np.ndarray:
        """(n_points, 2) for one field or (n_points, P, 2) for a list."""
        V = self._stack(fields)
        return np.stack([self.dx @ V, self.dy @ V], axis=-1)

    def laplacians(self, fields) -> np.ndarray:
        if self.lap is None:
            raise EvaluationError("sampler built without laplacian operator")
        return self.lap @ self._stack(fields)

    def jacobians(self, fields) -> np.ndarray:
        """(n_points, P, 3) generalized Jacobians with rows (Du, u)."""
        V = self._stack(fields)
        return np.stack([self.dx @ V, self.dy @ V, self.value @ V], axis=-1)


def field_eval(u, x, side="auto") -> tuple[float, np.ndarray, float]:
    """(u, Du, Laplacian of u) at a single point x on the requested side."""
    s = Sampler.build(u.mesh, np.asarray(x, dtype=float)[None, :], side, laplacian=True)
    return float(s.values(u)[0]), s.gradients(u)[0], float(s.laplacians(u)[0])
