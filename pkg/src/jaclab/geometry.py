"""Piecewise domains bounded by nested circles, and subdomain orderings.

Regions are numbered 1..N for the circular subdomains and N+1 for the
background (the outer domain minus every circle).  Each circle is the
interface between its own region and the region that immediately
encloses it.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import permutations
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class Circle:
    center: tuple[float, float]
    radius: float

    def signed_distance(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return np.hypot(pts[:, 0] - self.center[0], pts[:, 1] - self.center[1]) - self.radius


@dataclass(frozen=True)
class Outer:
    """Outer boundary: a disk or an axis-aligned rectangle."""

    kind: str  # "disk" | "rect"
    center: tuple[float, float] = (0.0, 0.0)
    radius: float = 1.0
    lower: tuple[float, float] = (-1.0, -1.0)
    upper: tuple[float, float] = (1.0, 1.0)

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        if self.kind == "disk":
            return np.hypot(pts[:, 0] - self.center[0], pts[:, 1] - self.center[1]) < self.radius
        return ((pts[:, 0] > self.lower[0]) & (pts[:, 0] < self.upper[0])
                & (pts[:, 1] > self.lower[1]) & (pts[:, 1] < self.upper[1]))

    def distance_inside(self, circle: Circle) -> float:
        """Gap between a circle and the outer boundary (negative if it pokes out)."""
        cx, cy = circle.center
        if self.kind == "disk":
            return self.radius - math.hypot(cx - self.center[0], cy - self.center[1]) - circle.radius
        return min(cx - self.lower[0], self.upper[0] - cx,
                   cy - self.lower[1], self.upper[1] - cy) - circle.radius

    @property
    def diameter(self) -> float:
        if self.kind == "disk":
            return 2.0 * self.radius
        return math.hypot(self.upper[0] - self.lower[0], self.upper[1] - self.lower[1])

    @property
    def centroid(self) -> tuple[float, float]:
        if self.kind == "disk":
            return self.center
        return (0.5 * (self.lower[0] + self.upper[0]), 0.5 * (self.lower[1] + self.upper[1]))

    def bbox(self) -> tuple[float, float, float, float]:
        if self.kind == "disk":
            cx, cy = self.center
            r = self.radius
            return cx - r, cy - r, cx + r, cy + r
        return (*self.lower, *self.upper)


@dataclass(frozen=True)
class Interface:
    """Interface circle between region ``i`` and region ``j``.

    The unit normal points from region i into region j.  For the natural
    orientation (i the circle, j its parent) this is the outward radial
    direction; ``flipped()`` swaps the roles.
    """

    i: int
    j: int
    circle: Circle
    sign: float = 1.0
    tube_halfwidth: float = 0.0

    def normal(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        v = pts - np.asarray(self.circle.center)
        r = np.hypot(v[:, 0], v[:, 1])[:, None]
        return self.sign * v / r

    def chart(self, pts: np.ndarray) -> np.ndarray:
        """Radial chart x -> (x - center) / radius, sending the interface to S^1."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return (pts - np.asarray(self.circle.center)) / self.circle.radius

    def points(self, k: int, phase: float = 0.0) -> np.ndarray:
        t = phase + 2.0 * np.pi * np.arange(k) / k
        c = self.circle
        return np.c_[c.center[0] + c.radius * np.cos(t), c.center[1] + c.radius * np.sin(t)]

    def flipped(self) -> "Interface":
        return Interface(self.j, self.i, self.circle, -self.sign, self.tube_halfwidth)

    def with_tube(self, halfwidth: float) -> "Interface":
        return Interface(self.i, self.j, self.circle, self.sign, halfwidth)

    @property
    def key(self) -> tuple[int, int]:
        return (self.i, self.j)


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def _circle_gap(a: Circle, b: Circle) -> tuple[str, float]:
    """Relation between two circles and the gap separating them."""
    dist = math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])
    if dist >= a.radius + b.radius:
        return "disjoint", dist - a.radius - b.radius
    big, small = (a, b) if a.radius >= b.radius else (b, a)
    if dist + small.radius <= big.radius:
        return "nested", big.radius - dist - small.radius
    return "intersect", -1.0


class Scene:
    """Outer domain plus circular subdomains (ids 1..N), background id N+1."""

    def __init__(self, outer: Outer, circles: list[Circle] | dict[int, Circle]):
        if isinstance(circles, dict):
            ids = sorted(circles)
            if ids != list(range(1, len(ids) + 1)):
                raise ValueError(f"subdomain ids must be 1..N, got {ids}")
            circles = [circles[k] for k in ids]
        self.outer = outer
        self.circles: list[Circle] = list(circles)
        self.N = len(self.circles)
        self.background_id = self.N + 1
        self.parent = self._compute_parents()

    # -- construction -------------------------------------------------
    @classmethod
    def from_dict(cls, data: dict) -> "Scene":
        outer_d = data["outer"]
        if "disk" in outer_d:
            d = outer_d["disk"]
            outer = Outer("disk", center=tuple(map(float, d.get("center", (0.0, 0.0)))),
                          radius=float(d["radius"]))
        elif "rect" in outer_d:
            d = outer_d["rect"]
            outer = Outer("rect", lower=tuple(map(float, d["lower"])), upper=tuple(map(float, d["upper"])))
        else:
            raise KeyError("outer must contain 'disk' or 'rect'")
        circles = {}
        for sub in data.get("subdomains", []):
            c = sub["circle"]
            circles[int(sub["id"])] = Circle(tuple(map(float, c["center"])), float(c["radius"]))
        return cls(outer, circles)

    @classmethod
    def from_json(cls, path: str | Path) -> "Scene":
        data = json.loads(Path(path).read_text())
        return cls.from_dict(data.get("scene", data))

    def to_dict(self) -> dict:
        if self.outer.kind == "disk":
            outer = {"disk": {"center": list(self.outer.center), "radius": self.outer.radius}}
        else:
            outer = {"rect": {"lower": list(self.outer.lower), "upper": list(self.outer.upper)}}
        return {"outer": outer,
                "subdomains": [{"id": k + 1, "circle": {"center": list(c.center), "radius": c.radius}}
                               for k, c in enumerate(self.circles)]}

    def _compute_parents(self) -> dict[int, int]:
        parent = {}
        for k, c in enumerate(self.circles, start=1):
            best, best_r = self.background_id, math.inf
            for m, o in enumerate(self.circles, start=1):
                if m == k:
                    continue
                rel, _ = _circle_gap(c, o)
                if rel == "nested" and o.radius > c.radius and o.radius < best_r:
                    best, best_r = m, o.radius
            parent[k] = best
        return parent

    # -- topology -----------------------------------------------------
    @property
    def region_ids(self) -> list[int]:
        return list(range(1, self.N + 2))

    def children(self, region: int) -> list[int]:
        return sorted(k for k, p in self.parent.items() if p == region)

    def neighbors(self, region: int) -> set[int]:
        nb = set(self.children(region))
        if region != self.background_id:
            nb.add(self.parent[region])
        return nb

    def contained_count(self, region: int) -> int:
        """g_U for U the disk bounded by circle ``region``: pieces inside it (itself included)."""
        if region == self.background_id:
            return self.N + 1
        return 1 + sum(self.contained_count(c) for c in self.children(region))

    def interfaces(self, tube_halfwidth: float = 0.0) -> list[Interface]:
        return [Interface(k, self.parent[k], c, 1.0, tube_halfwidth)
                for k, c in enumerate(self.circles, start=1)]

    def interface(self, i: int, j: int, tube_halfwidth: float = 0.0) -> Interface:
        for itf in self.interfaces(tube_halfwidth):
            if (itf.i, itf.j) == (i, j):
                return itf
            if (itf.j, itf.i) == (i, j):
                return itf.flipped()
        raise KeyError(f"no interface between regions {i} and {j}")

    # -- point queries ------------------------------------------------
    def region_of(self, pts: np.ndarray) -> np.ndarray:
        """Region id of each point (innermost containing circle); 0 outside the domain."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = np.where(self.outer.contains(pts), self.background_id, 0)
        best_r = np.full(len(pts), np.inf)
        for k, c in enumerate(self.circles, start=1):
            inside = (c.signed_distance(pts) < 0) & (c.radius < best_r)
            out[inside] = k
            best_r[inside] = c.radius
        return out

    def interface_distance(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if not self.circles:
            return np.full(len(pts), np.inf)
        return np.min(np.abs([c.signed_distance(pts) for c in self.circles]), axis=0)

    def grid(self, spacing: float, tube_halfwidth: float = 0.0, margin: float = 0.0) -> np.ndarray:
        """Regular grid of points inside the domain, away from interface tubes.

        ``margin`` keeps points that far from the outer boundary.
        """
        x0, y0, x1, y1 = self.outer.bbox()
        xs = np.arange(x0 + 0.5 * spacing, x1, spacing)
        ys = np.arange(y0 + 0.5 * spacing, y1, spacing)
        X, Y = np.meshgrid(xs, ys)
        pts = np.c_[X.ravel(), Y.ravel()]
        keep = self.outer.contains(pts)
        if margin > 0:
            keep &= self._outer_gap(pts) > margin
        if tube_halfwidth > 0:
            keep &= self.interface_distance(pts) > tube_halfwidth
        return pts[keep]

    def _outer_gap(self, pts: np.ndarray) -> np.ndarray:
        o = self.outer
        if o.kind == "disk":
            return o.radius - np.hypot(pts[:, 0] - o.center[0], pts[:, 1] - o.center[1])
        return np.min([pts[:, 0] - o.lower[0], o.upper[0] - pts[:, 0],
                       pts[:, 1] - o.lower[1], o.upper[1] - pts[:, 1]], axis=0)

    # -- separation ---------------------------------------------------
    def boundary_components(self, region: int) -> list[int | str]:
        """Circle ids (and "outer") bounding a region."""
        comps: list[int | str] = list(self.children(region))
        if region == self.background_id:
            comps.append("outer")
        else:
            comps.append(region)
        return comps

    @property
    def d0(self) -> float:
        """Minimum gap between distinct boundary components of a common region."""
        best = math.inf
        for r in self.region_ids:
            comps = self.boundary_components(r)
            for a in range(len(comps)):
                for b in range(a + 1, len(comps)):
                    best = min(best, self._component_gap(comps[a], comps[b]))
        if self.outer is not None:
            for c in self.circles:
                best = min(best, self.outer.distance_inside(c))
        return best

    def _component_gap(self, a, b) -> float:
        if a == "outer":
            return self.outer.distance_inside(self.circles[b - 1])
        if b == "outer":
            return self.outer.distance_inside(self.circles[a - 1])
        return _circle_gap(self.circles[a - 1], self.circles[b - 1])[1]

    @property
    def diameter(self) -> float:
        return self.outer.diameter


def validate_scene(scene: Scene) -> ValidationReport:
    """Check the domain assumptions; violations are returned, never raised."""
    rep = ValidationReport()
    for k, c in enumerate(scene.circles, start=1):
        if not c.radius > 0:
            rep.violations.append(f"circle {k}: non-positive radius")
    for a in range(scene.N):
        for b in range(a + 1, scene.N):
            rel, gap = _circle_gap(scene.circles[a], scene.circles[b])
            if rel == "intersect":
                rep.violations.append(f"interfaces intersect: circles {a + 1} and {b + 1}")
            elif gap <= 0:
                rep.violations.append(f"interfaces tangent: circles {a + 1} and {b + 1}")
    for k, c in enumerate(scene.circles, start=1):
        if scene.outer.distance_inside(c) <= 0:
            rep.violations.append(f"d(∪Ω_i, ℝ²∖Ω) = 0: circle {k} touches or crosses the outer boundary")
    if not rep.violations and scene.N and not scene.d0 > 0:
        rep.violations.append("separation d0 is not positive")
    # every circle bounds exactly its own region and its parent region
    for k in range(1, scene.N + 1):
        if scene.parent[k] == k:
            rep.violations.append(f"circle {k} is its own parent")
    return rep


# ---------------------------------------------------------------------------
# construction maps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConstructionMap:
    order: tuple[int, ...]           # order[s-1] = i(s)
    attach: tuple[int | None, ...]   # attach[s-1] = k(s) (1-based position), None for s = 1

    @property
    def n(self) -> int:
        return len(self.order)


def _adjacency(scene: Scene) -> dict[int, set[int]]:
    return {r: scene.neighbors(r) for r in scene.region_ids}


def attach_positions(order: tuple[int, ...] | list[int], adjacency: dict[int, set[int]]) -> list[int | None] | None:
    """k(j) for every j >= 2, or None if ``order`` is not a construction map.

    Region order[j-1] must share exactly one interface with the union of the
    regions placed before it.
    """
    attach: list[int | None] = [None]
    for j in range(1, len(order)):
        hits = [p for p in range(j) if order[p] in adjacency[order[j]]]
        if len(hits) != 1:
            return None
        attach.append(hits[0] + 1)
    return attach


def is_construction_map(scene: Scene, order) -> bool:
    order = tuple(order)
    if sorted(order) != scene.region_ids:
        return False
    return attach_positions(order, _adjacency(scene)) is not None


def construction_map(scene: Scene, start: int, order=None) -> ConstructionMap:
    """Build (or check) a construction map starting at region ``start``.

    Ties between admissible next regions go to the smallest id.  Passing
    ``order`` validates a given permutation instead.
    """
    adj = _adjacency(scene)
    if order is not None:
        order = tuple(order)
        attach = attach_positions(order, adj)
        if order[0] != start or sorted(order) != scene.region_ids or attach is None:
            raise ValueError(f"{order} is not a construction map starting at {start}")
        return ConstructionMap(order, tuple(attach))
    placed = [start]
    remaining = set(scene.region_ids) - {start}
    while remaining:
        cands = sorted(r for r in remaining
                       if sum(1 for p in placed if p in adj[r]) == 1)
        assert cands, "no admissible next region; scene is not valid"
        placed.append(cands[0])
        remaining.discard(cands[0])
    attach = attach_positions(placed, adj)
    assert attach is not None
    return ConstructionMap(tuple(placed), tuple(attach))


def all_construction_maps(scene: Scene, start: int) -> list[tuple[int, ...]]:
    """Brute-force enumeration over permutations (small scenes only)."""
    adj = _adjacency(scene)
    others = [r for r in scene.region_ids if r != start]
    return sorted((start, *p) for p in permutations(others)
                  if attach_positions((start, *p), adj) is not None)


def index_maps(cmap: ConstructionMap) -> list[list[int]]:
    """Coefficient-assignment lists j^1..j^{N+1} attached to a construction map.

    Entry ``[s-1][r-1]`` is the region whose coefficients act on region r
    in the s-th intermediate operator.
    """
    n = cmap.n
    order, attach = cmap.order, cmap.attach
    maps: list[list[int]] = []
    prev = [order[0]] * n
    maps.append(prev)
    for s in range(2, n + 1):
        cur = [0] * n
        for ell in range(1, n + 1):
            r = order[ell - 1]
            if ell <= s - 1:
                cur[r - 1] = prev[r - 1]
            elif ell == s:
                cur[r - 1] = r
            else:
                cur[r - 1] = cur[order[attach[ell - 1] - 1] - 1]
        maps.append(cur)
        prev = cur
    return maps


def check_index_maps(cmap: ConstructionMap, maps: list[list[int]]) -> bool:
    """Independent check of the three defining rules of the index maps."""
    n = cmap.n
    order, attach = cmap.order, cmap.attach
    if len(maps) != n or any(len(m) != n for m in maps):
        return False
    if any(v != order[0] for v in maps[0]):
        return False
    for s in range(2, n + 1):
        cur, prev = maps[s - 1], maps[s - 2]
        for ell in range(1, n + 1):
            r = order[ell - 1]
            if ell <= s - 1 and cur[r - 1] != prev[r - 1]:
                return False
            if ell == s and cur[r - 1] != r:
                return False
            if ell > s and cur[r - 1] != cur[order[attach[ell - 1] - 1] - 1]:
                return False
    return True
