"""Interface-fitted triangulations of piecewise domains (backed by Triangle)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import triangle

from ..geometry import Scene


class MeshError(RuntimeError):
    pass


@dataclass
class Mesh:
    points: np.ndarray                 # (n, 2)
    triangles: np.ndarray              # (m, 3), counter-clockwise
    region: np.ndarray                 # (m,) region id per triangle
    boundary_nodes: np.ndarray         # outer boundary (Dirichlet) nodes
    interface_nodes: dict[int, np.ndarray]   # circle id -> node ids on that circle
    interface_edges: dict[int, np.ndarray]   # circle id -> (k, 2) node pairs
    h: float
    scene: Scene | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.points)

    @property
    def n_elements(self) -> int:
        return len(self.triangles)

    def areas(self) -> np.ndarray:
        if "areas" not in self._cache:
            p = self.points[self.triangles]
            d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
            self._cache["areas"] = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
        return self._cache["areas"]

    def gradients(self) -> np.ndarray:
        """(m, 3, 2): gradient of each barycentric coordinate on each element."""
        if "grads" not in self._cache:
            p = self.points[self.triangles]
            area2 = 2.0 * self.areas()
            g = np.empty((self.n_elements, 3, 2))
            for k in range(3):
                a, b = p[:, (k + 1) % 3], p[:, (k + 2) % 3]
                g[:, k, 0] = (a[:, 1] - b[:, 1]) / area2
                g[:, k, 1] = (b[:, 0] - a[:, 0]) / area2
            self._cache["grads"] = g
        return self._cache["grads"]

    def min_angle(self) -> float:
        p = self.points[self.triangles]
        angles = []
        for k in range(3):
            u = p[:, (k + 1) % 3] - p[:, k]
            v = p[:, (k + 2) % 3] - p[:, k]
            cosang = (u * v).sum(1) / np.linalg.norm(u, axis=1) / np.linalg.norm(v, axis=1)
            angles.append(np.degrees(np.arccos(np.clip(cosang, -1, 1))))
        return float(np.min(angles))

    def node_regions(self) -> dict[int, np.ndarray]:
        """Region id -> sorted node ids touched by that region's triangles."""
        if "node_regions" not in self._cache:
            self._cache["node_regions"] = {
                int(r): np.unique(self.triangles[self.region == r]) for r in np.unique(self.region)}
        return self._cache["node_regions"]

    def chord_error(self) -> dict[int, float]:
        """Maximum distance from each interface polygon edge midpoint to its circle."""
        out = {}
        for cid, edges in self.interface_edges.items():
            c = self.scene.circles[cid - 1]
            mid = 0.5 * (self.points[edges[:, 0]] + self.points[edges[:, 1]])
            out[cid] = float(np.abs(c.signed_distance(mid)).max())
        return out


def _circle_points(center, radius, h) -> np.ndarray:
    n = max(12, int(math.ceil(2 * math.pi * radius / h)))
    t = 2 * math.pi * np.arange(n) / n
    return np.c_[center[0] + radius * np.cos(t), center[1] + radius * np.sin(t)]


def _rect_points(lower, upper, h) -> np.ndarray:
    (x0, y0), (x1, y1) = lower, upper
    pts = []
    corners = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
    for a, b in zip(corners, corners[1:] + corners[:1]):
        n = max(2, int(math.ceil(math.dist(a, b) / h)))
        s = np.arange(n) / n
        pts.append(np.c_[a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])])
    return np.vstack(pts)


AREA_FACTOR = 0.6  # max triangle area = AREA_FACTOR * h^2 gives mean edge length close to h
MIN_ANGLE = 28.0


def build_mesh(scene: Scene, h: float, check_size: bool = True) -> Mesh:
    """Quality triangulation with every interface circle resolved by mesh edges.

    Interface and boundary vertices sit exactly on their circles; no
    Steiner points are inserted on them, so each interface is a polygon
    with chord length about h.
    """
    if check_size and scene.N and not h < scene.d0 / 4:
        raise MeshError(f"mesh size h={h} must be below d0/4={scene.d0 / 4:.4g}")
    chunks, segs, marks = [], [], []
    off = 0
    o = scene.outer
    outer_pts = _circle_points(o.center, o.radius, h) if o.kind == "disk" else _rect_points(o.lower, o.upper, h)
    loops = [(outer_pts, 1)] + [(_circle_points(c.center, c.radius, h), k + 2)
                                for k, c in enumerate(scene.circles)]
    for pts, mark in loops:
        n = len(pts)
        idx = off + np.arange(n)
        chunks.append(pts)
        segs.append(np.c_[idx, np.roll(idx, -1)])
        marks.append(np.full(n, mark))
        off += n
    data = {"vertices": np.vstack(chunks), "segments": np.vstack(segs),
            "segment_markers": np.concatenate(marks)[:, None],
            "vertex_markers": np.concatenate(marks)[:, None]}
    try:
        out = triangle.triangulate(data, f"pq{MIN_ANGLE}a{AREA_FACTOR * h * h:.14f}YY")
    except Exception as exc:  # pragma: no cover - Triangle failures are rare
        raise MeshError(f"meshing failed: {exc}") from exc
    pts = out["vertices"]
    tris = out["triangles"].astype(np.int64)
    n_fixed = off
    # Triangle keeps input vertices first and in order
    if not np.allclose(pts[:n_fixed], data["vertices"]):
        raise MeshError("Triangle reordered the constrained vertices")
    p = pts[tris]
    signed = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
    flip = signed < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    region = scene.region_of(pts[tris].mean(axis=1))
    if np.any(region == 0):
        raise MeshError("triangle centroid outside the domain")
    n_outer = len(outer_pts)
    boundary = np.arange(n_outer)
    iface_nodes, iface_edges = {}, {}
    start = n_outer
    for k, c in enumerate(scene.circles, start=1):
        n = len(loops[k][0])
        ids = start + np.arange(n)
        iface_nodes[k] = ids
        iface_edges[k] = np.c_[ids, np.roll(ids, -1)]
        start += n
    mesh = Mesh(pts, tris, region, boundary, iface_nodes, iface_edges, h, scene)
    _check_tagging(mesh)
    return mesh


def _check_tagging(mesh: Mesh) -> None:
    """Every interface edge must separate the circle's region from its parent region."""
    scene = mesh.scene
    n = mesh.n_nodes
    tris = mesh.triangles
    keys, owner = [], []
    for k in range(3):
        a, b = tris[:, k], tris[:, (k + 1) % 3]
        keys.append(np.minimum(a, b) * n + np.maximum(a, b))
        owner.append(mesh.region)
    keys, owner = np.concatenate(keys), np.concatenate(owner)
    order = np.argsort(keys, kind="stable")
    keys, owner = keys[order], owner[order]
    for cid, edges in mesh.interface_edges.items():
        want = sorted({cid, scene.parent[cid]})
        ek = np.minimum(edges[:, 0], edges[:, 1]) * n + np.maximum(edges[:, 0], edges[:, 1])
        lo = np.searchsorted(keys, ek, side="left")
        hi = np.searchsorted(keys, ek, side="right")
        if np.any(hi - lo != 2):
            raise MeshError(f"interface edges of circle {cid} are not shared by two triangles")
        got = np.sort(np.c_[owner[lo], owner[lo + 1]], axis=1)
        if np.any(got != want):
            raise MeshError(f"interface edges of circle {cid} do not separate regions {want}")


def build_annulus_mesh(center, inner: float, outer: float, h: float, interface: float | None = None,
                       scene: Scene | None = None) -> Mesh:
    """Mesh of the annulus inner < |x - center| < outer; both circles are Dirichlet boundary.

    ``interface`` inserts a resolved circle of that radius (for annuli that
    straddle an interface); with ``scene`` the triangles are tagged by the
    scene's regions, otherwise every triangle is region 1.
    """
    loops = [_circle_points(center, outer, h), _circle_points(center, inner, h)]
    if interface is not None:
        if not inner < interface < outer:
            raise MeshError("interface radius must lie strictly inside the annulus")
        loops.append(_circle_points(center, interface, h))
    chunks, segs, off = [], [], 0
    for pts_ in loops:
        idx = off + np.arange(len(pts_))
        chunks.append(pts_)
        segs.append(np.c_[idx, np.roll(idx, -1)])
        off += len(pts_)
    n_bd = len(loops[0]) + len(loops[1])
    data = {"vertices": np.vstack(chunks), "segments": np.vstack(segs),
            "holes": np.array([center], dtype=float)}
    out = triangle.triangulate(data, f"pq{MIN_ANGLE}a{AREA_FACTOR * h * h:.14f}YY")
    pts = out["vertices"]
    tris = out["triangles"].astype(np.int64)
    p = pts[tris]
    signed = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
    tris[signed < 0] = tris[signed < 0][:, [0, 2, 1]]
    if scene is not None:
        region = scene.region_of(pts[tris].mean(axis=1))
    else:
        region = np.ones(len(tris), dtype=int)
    return Mesh(pts, tris, region, np.arange(n_bd), {}, {}, h, scene)
