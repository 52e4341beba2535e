"""Conductivity reconstruction from internal solution data.

For A = gamma I the equation -div(gamma Du) = 0 gives, inside each region,
D(ln gamma) . Du = -Laplacian(u), so D ln gamma is the least-squares
solution of the stacked rows over a family with full-rank gradients.
Across an interface the normal flux gamma Du.n is continuous, so the jump
of ln gamma equals minus the jump of ln|Du.n|.  Integrating the gradient
field region by region and stitching with the jumps recovers ln gamma up
to one additive constant, i.e. gamma up to a multiplicative constant.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree

from .coefficients import CoefficientSet, expression, make_operator
from .geometry import Interface, Scene
from .solver.evaluate import Sampler
from .solver.fem import DirichletProblem, SolutionField
from .solver.mesh import Mesh


class ReconstructionError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# phantoms and data
# ---------------------------------------------------------------------------

@dataclass
class Phantom:
    scene: Scene
    gammas: dict[int, object]            # region -> float, expression string or callable
    anchor: tuple[float, float]
    anchor_value: float = 1.0
    lam: float | None = None

    def __post_init__(self):
        self.gammas = {int(k): (expression(v) if isinstance(v, str) else v) for k, v in self.gammas.items()}
        if set(self.gammas) != set(self.scene.region_ids):
            raise ValueError(f"phantom needs gamma for regions {self.scene.region_ids}")
        a = np.asarray(self.anchor, dtype=float)[None]
        if self.scene.region_of(a)[0] == 0:
            raise ValueError("anchor outside the domain")
        if self.scene.N and self.scene.interface_distance(a)[0] <= 0:
            raise ValueError("anchor on an interface")

    def gamma(self, pts, regions: np.ndarray | None = None) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        regions = self.scene.region_of(pts) if regions is None else regions
        out = np.full(len(pts), np.nan)
        for r, g in self.gammas.items():
            sel = regions == r
            if np.any(sel):
                out[sel] = g(pts[sel]) if callable(g) else float(g)
        return out

    def coefficients(self) -> CoefficientSet:
        return CoefficientSet.conductivity(self.gammas, self.lam)

    def scaled(self, c: float) -> "Phantom":
        g = {r: (lambda p, f=v: c * f(p)) if callable(v) else c * float(v) for r, v in self.gammas.items()}
        lam = None if self.lam is None else self.lam / max(c, 1.0)
        return Phantom(self.scene, g, self.anchor, self.anchor_value, lam)


DEFAULT_TRACES = ("x", "y", "1", "x**2 - y**2", "2*x*y")


def internal_data(phantom: Phantom, mesh: Mesh, traces=DEFAULT_TRACES) -> list[SolutionField]:
    """Forward solves of -div(gamma Du) = 0 with the given boundary traces."""
    op = make_operator(phantom.coefficients())
    fns = [expression(t) if isinstance(t, str) else t for t in traces]
    labels = [t if isinstance(t, str) else getattr(t, "source", repr(t)) for t in traces]
    return DirichletProblem(op, mesh).solve_many(fns, labels)


# ---------------------------------------------------------------------------
# interface jumps
# ---------------------------------------------------------------------------

@dataclass
class JumpEstimate:
    interface: tuple[int, int]
    value: float
    dispersion: float
    samples: np.ndarray          # per-sample estimates (nan where excluded)
    selected: np.ndarray         # chosen field index per sample
    offset: float
    flux_defect: float           # median |ln|gamma Du_p.n|^+ - ln|gamma Du_p.n|^-| when gamma is known

    def to_dict(self) -> dict:
        return {"interface": list(self.interface), "value": self.value, "dispersion": self.dispersion,
                "offset": self.offset, "n_used": int(np.isfinite(self.samples).sum())}


def _probe_normals(us, itf: Interface, k: int, offset: float, phase: float = 0.05):
    """Du.n on both sides (natural orientation: minus = circle side) for all fields, plus full gradients."""
    mesh = us[0].mesh
    canon = itf if itf.sign > 0 else itf.flipped()
    x = canon.points(k, phase)
    n = canon.normal(x)
    inner = Sampler.build(mesh, x - offset * n, canon.i)
    outer = Sampler.build(mesh, x + offset * n, canon.j)
    g_in = inner.gradients(us)              # (k, P, 2)
    g_out = outer.gradients(us)
    dn_in = np.einsum("kpi,ki->kp", g_in, n)
    dn_out = np.einsum("kpi,ki->kp", g_out, n)
    return canon, x, n, g_in, g_out, dn_in, dn_out


def recover_jumps(us, interface: Interface, k: int = 128, offset: float | None = None,
                  rel_threshold: float = 1e-3, extrapolate: bool = True) -> JumpEstimate:
    """[ln gamma]_ij = (ln gamma on side j) - (ln gamma on side i), with n pointing from i to j.

    At each sample the field with the largest gradient on the outer (parent)
    side is used; selecting on a fixed side makes the estimate exactly
    antisymmetric under swapping i and j.  With ``extrapolate`` the one-sided
    values of ln|Du.n| are probed at offsets d and 2d and extrapolated
    linearly onto the interface, which removes the O(d) bias caused by the
    variation of Du along the normal.
    """
    us = list(us)
    offset = 2 * us[0].mesh.h if offset is None else offset
    canon, x, n, g_in, g_out, dn_in, dn_out = _probe_normals(us, interface, k, offset)
    p = np.argmax(np.linalg.norm(g_out, axis=2), axis=1)
    rows = np.arange(k)
    a_out = np.abs(dn_out[rows, p])
    a_in = np.abs(dn_in[rows, p])
    scale = max(np.abs(dn_out).max(), np.abs(dn_in).max(), 1e-300)
    ok = (a_out > rel_threshold * scale) & (a_in > rel_threshold * scale)
    l_out, l_in = np.log(np.where(ok, a_out, 1.0)), np.log(np.where(ok, a_in, 1.0))
    if extrapolate:
        far = _probe_normals(us, interface, k, 2 * offset)
        b_out = np.abs(far[6][rows, p])
        b_in = np.abs(far[5][rows, p])
        ok &= (b_out > rel_threshold * scale) & (b_in > rel_threshold * scale)
        l_out = 2 * l_out - np.log(np.where(ok, b_out, 1.0))
        l_in = 2 * l_in - np.log(np.where(ok, b_in, 1.0))
    est = np.full(k, np.nan)
    est[ok] = -(l_out[ok] - l_in[ok])
    if not np.any(ok):
        raise ReconstructionError(f"all normal derivatives vanish on interface {canon.key}")
    val = float(np.median(est[ok]))
    disp = float(np.median(np.abs(est[ok] - val)))
    if interface.sign < 0:
        val, est = -val, -est
    return JumpEstimate(interface.key, val, disp, est, p, offset, math.nan)


def flux_log_defect(us, interface: Interface, gamma_in: Callable, gamma_out: Callable, k: int = 128,
                    offset: float | None = None) -> float:
    """Median one-sided difference of ln|gamma Du_p.n| at probe pairs (tends to 0 with the probe offset)."""
    us = list(us)
    offset = 2 * us[0].mesh.h if offset is None else offset
    canon, x, n, g_in, g_out, dn_in, dn_out = _probe_normals(us, interface, k, offset)
    p = np.argmax(np.linalg.norm(g_out, axis=2), axis=1)
    rows = np.arange(k)
    fin = np.abs(gamma_in(x - offset * n) * dn_in[rows, p])
    fout = np.abs(gamma_out(x + offset * n) * dn_out[rows, p])
    return float(np.median(np.abs(np.log(fout) - np.log(fin))))


def jump_set_diagnostic(us, scene: Scene, k: int = 64, offset: float | None = None) -> dict:
    """Per interface: max over fields of the one-sided gradient jump, against an in-region control.

    The control uses the same offsets around a circle of slightly larger
    radius lying inside the parent region, where gradients are continuous.
    """
    us = list(us)
    mesh = us[0].mesh
    offset = 2 * mesh.h if offset is None else offset
    out = {}
    for itf in scene.interfaces():
        _, x, n, g_in, g_out, _, _ = _probe_normals(us, itf, k, offset)
        jump = float(np.linalg.norm(g_out - g_in, axis=2).max())
        shift = min(scene.d0 / 4, 8 * offset) + 2 * offset
        xc = x + shift * n
        a = Sampler.build(mesh, xc - offset * n, itf.j).gradients(us)
        b = Sampler.build(mesh, xc + offset * n, itf.j).gradients(us)
        out[f"{itf.i}|{itf.j}"] = {"gradient_jump": jump, "control": float(np.linalg.norm(a - b, axis=2).max())}
    return out


# ---------------------------------------------------------------------------
# log-gradient per region
# ---------------------------------------------------------------------------

@dataclass
class GradientField:
    region: int
    points: np.ndarray
    g: np.ndarray                # (n, 2) recovered D ln gamma
    flagged: np.ndarray          # rank-deficient stacks
    residual: np.ndarray         # per-point least-squares residual norm
    rank: np.ndarray


def recover_log_gradient(us, region: int, pts: np.ndarray, rank_rtol: float = 1e-8) -> GradientField:
    """Least squares Du_l . g = -Laplacian(u_l), l = 1..P, at each point of one region."""
    us = list(us)
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    s = Sampler.build(us[0].mesh, pts, region, laplacian=True)
    G = s.gradients(us)                     # (n, P, 2)
    rhs = -s.laplacians(us)                 # (n, P)
    sv = np.linalg.svd(G, compute_uv=False)
    rank = np.sum(sv > rank_rtol * sv[:, :1], axis=1)
    flagged = rank < 2
    g = np.zeros((len(pts), 2))
    ok = ~flagged
    if np.any(ok):
        N = np.einsum("npi,npj->nij", G[ok], G[ok])
        r = np.einsum("npi,np->ni", G[ok], rhs[ok])
        g[ok] = np.linalg.solve(N, r[..., None])[..., 0]
    res = np.linalg.norm(np.einsum("npi,ni->np", G, g) - rhs, axis=1)
    return GradientField(region, pts, g, flagged, res, rank)


# ---------------------------------------------------------------------------
# assembly of ln gamma
# ---------------------------------------------------------------------------

def _grid_potential(pts: np.ndarray, g: np.ndarray, spacing: float) -> np.ndarray:
    """Least-squares phi with (phi_b - phi_a) = g_mid . (x_b - x_a) over lattice neighbours; phi[0] = 0.

    The normal equations are a graph Laplacian, i.e. a discrete Poisson
    problem with natural boundary conditions.
    """
    n = len(pts)
    if n == 1:
        return np.zeros(1)
    key = np.floor(pts / spacing + 1e-9).astype(np.int64)
    index = {tuple(k): i for i, k in enumerate(key)}
    rows, cols, vals, rhs = [], [], [], []
    e = 0
    for off in ((1, 0), (0, 1)):
        for i, k in enumerate(key):
            j = index.get((k[0] + off[0], k[1] + off[1]))
            if j is None:
                continue
            rows += [e, e]
            cols += [j, i]
            vals += [1.0, -1.0]
            rhs.append(0.5 * (g[i] + g[j]) @ (pts[j] - pts[i]))
            e += 1
    rows.append(e)
    cols.append(0)
    vals.append(1.0)
    rhs.append(0.0)
    Gm = sp.csr_matrix((vals, (rows, cols)), shape=(e + 1, n))
    L = (Gm.T @ Gm).tocsc()
    phi = spla.spsolve(L, Gm.T @ np.asarray(rhs))
    # connectivity check: a disconnected lattice leaves a singular normal matrix
    if not np.all(np.isfinite(phi)):
        raise ReconstructionError("region sample lattice is disconnected")
    return phi


@dataclass
class RegionPotential:
    region: int
    points: np.ndarray
    g: np.ndarray
    phi: np.ndarray
    tree: cKDTree

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        _, i = self.tree.query(x)
        return self.phi[i] + np.einsum("ni,ni->n", self.g[i], x - self.points[i])


@dataclass
class ReconResult:
    jumps: dict[str, JumpEstimate]
    gradients: dict[int, GradientField]
    potentials: dict[int, RegionPotential]
    offsets: dict[int, float]                # additive constant per region before normalization
    anchor: tuple[float, float]
    anchor_value: float
    errors: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def log_gamma_raw(self, pts, regions) -> np.ndarray:
        """ln gamma up to the global constant (pre-normalization output)."""
        pts = np.atleast_2d(pts)
        out = np.full(len(pts), np.nan)
        for r, pot in self.potentials.items():
            sel = regions == r
            if np.any(sel):
                out[sel] = pot(pts[sel]) + self.offsets[r]
        return out

    def gamma(self, pts, regions) -> np.ndarray:
        """Normalized conductivity: anchor_value * exp(raw(x) - raw(anchor))."""
        return self.anchor_value * np.exp(self.log_gamma_raw(pts, regions) - self._raw_anchor)

    @property
    def _raw_anchor(self) -> float:
        a = np.asarray(self.anchor, dtype=float)[None]
        r = self.meta["anchor_region"]
        return float(self.log_gamma_raw(a, np.array([r]))[0])

    def to_dict(self) -> dict:
        return {"jumps": {k: v.to_dict() for k, v in self.jumps.items()}, "errors": self.errors,
                "anchor": list(self.anchor), "anchor_value": self.anchor_value,
                "region_offsets": {str(k): v for k, v in self.offsets.items()}, **self.meta}


def _interface_mean(pot: RegionPotential, itf: Interface, band: float) -> float:
    """Mean over nearby samples of phi extrapolated linearly onto the interface circle."""
    c = itf.circle
    v = pot.points - np.asarray(c.center)
    rho = np.hypot(v[:, 0], v[:, 1])
    sel = np.abs(rho - c.radius) <= band
    if not np.any(sel):
        sel = np.abs(rho - c.radius) <= np.abs(rho - c.radius).min() * 1.5 + 1e-12
    foot = np.asarray(c.center) + v[sel] * (c.radius / rho[sel])[:, None]
    return float(np.mean(pot.phi[sel] + np.einsum("ni,ni->n", pot.g[sel], foot - pot.points[sel])))


def assemble_conductivity(scene: Scene, jumps: dict[str, JumpEstimate], gradients: dict[int, GradientField],
                          anchor, anchor_value: float, spacing: float, band: float | None = None) -> ReconResult:
    """Integrate D ln gamma per region and stitch constants along the nesting tree."""
    band = band if band is not None else 3 * spacing
    pots = {}
    for r, gf in gradients.items():
        keep = ~gf.flagged
        pts, g = gf.points[keep], gf.g[keep]
        if len(pts) == 0:
            raise ReconstructionError(f"no usable gradient samples in region {r}")
        phi = _grid_potential(pts, g, spacing)
        pots[r] = RegionPotential(r, pts, g, phi, cKDTree(pts))
    offsets = {scene.background_id: 0.0}
    # breadth-first from the background over the nesting tree
    queue = [scene.background_id]
    while queue:
        parent = queue.pop(0)
        for child in scene.children(parent):
            itf = scene.interface(child, parent)
            jump = jumps[f"{child}|{parent}"].value        # ln gamma_parent - ln gamma_child
            phi_p = _interface_mean(pots[parent], itf, band) + offsets[parent]
            phi_c = _interface_mean(pots[child], itf, band)
            offsets[child] = phi_p - jump - phi_c
            queue.append(child)
    if set(offsets) != set(pots):
        raise ReconstructionError("stitching did not reach every region")
    a = np.asarray(anchor, dtype=float)
    res = ReconResult(jumps, gradients, pots, offsets, (float(a[0]), float(a[1])), float(anchor_value),
                      meta={"anchor_region": int(scene.region_of(a[None])[0])})
    return res


def reconstruct(us, scene: Scene, anchor, anchor_value: float = 1.0, spacing: float | None = None,
                tube: float | None = None, k: int = 128) -> ReconResult:
    """Full pipeline: jumps on every interface, gradients per region, assembly."""
    us = list(us)
    mesh = us[0].mesh
    h = mesh.h
    spacing = spacing or 2 * h
    tube = 3 * h if tube is None else tube
    jumps = {}
    for itf in scene.interfaces():
        est = recover_jumps(us, itf, k)
        jumps[f"{itf.i}|{itf.j}"] = est
        flip = itf.flipped()
        jumps[f"{flip.i}|{flip.j}"] = JumpEstimate(flip.key, -est.value, est.dispersion, -est.samples,
                                                   est.selected, est.offset, est.flux_defect)
    grid = scene.grid(spacing, tube_halfwidth=tube, margin=h)
    regions = scene.region_of(grid)
    grads = {r: recover_log_gradient(us, r, grid[regions == r]) for r in scene.region_ids if np.any(regions == r)}
    res = assemble_conductivity(scene, jumps, grads, anchor, anchor_value, spacing)
    res.meta.update({"probe_offset": 2 * h, "spacing": spacing, "tube": tube, "h": h,
                     "flagged_points": int(sum(g.flagged.sum() for g in grads.values()))})
    return res


def evaluate_against(res: ReconResult, phantom: Phantom, spacing: float | None = None,
                     tube: float | None = None) -> dict:
    """Error metrics of the reconstruction against the phantom, off interface tubes."""
    scene = phantom.scene
    h = res.meta.get("h", 0.01)
    spacing = spacing or res.meta.get("spacing", 2 * h)
    tube = tube if tube is not None else res.meta.get("tube", 3 * h)
    pts = scene.grid(spacing, tube_halfwidth=tube, margin=h)
    regions = scene.region_of(pts)
    true = phantom.gamma(pts, regions)
    rec = res.gamma(pts, regions)
    errs = {"gamma_rel_l2": float(np.linalg.norm(rec - true) / np.linalg.norm(true)),
            "gamma_max_rel": float(np.max(np.abs(rec - true) / true))}
    for key, est in res.jumps.items():
        i, j = map(int, key.split("|"))
        itf = scene.interface(i, j)
        x = itf.points(1, 0.05)
        gi = phantom.gamma(x, np.array([i]))[0]
        gj = phantom.gamma(x, np.array([j]))[0]
        errs[f"jump_{key}_true"] = float(math.log(gj) - math.log(gi))
        errs[f"jump_{key}_error"] = float(est.value - (math.log(gj) - math.log(gi)))
    res.errors = errs
    return errs
