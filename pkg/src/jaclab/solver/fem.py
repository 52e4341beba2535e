"""P1 finite elements for L u = -div(A Du + b u) + c . Du + q u on interface-fitted meshes.

Weak form: a(u, v) = ∫ A Du.Dv + u b.Dv + (c.Du) v + q u v.
Fields are stored element-wise (three nodal values per triangle) so that
solutions with a prescribed jump across an interface are represented
exactly like continuous ones.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ..coefficients import OperatorSpec
from .linalg import LinearSolver, SingularSystemError
from .mesh import Mesh

# degree-2 interior rule on the reference triangle
QUAD_BARY = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
QUAD_W = np.array([1 / 3, 1 / 3, 1 / 3])

Trace = Callable[[np.ndarray], np.ndarray]


def _as_trace(g) -> Trace:
    if callable(g):
        return g
    val = float(g)
    return lambda pts: np.full(len(np.atleast_2d(pts)), val)


def quad_points(mesh: Mesh) -> np.ndarray:
    """(m, 3, 2) physical quadrature points."""
    p = mesh.points[mesh.triangles]
    return np.einsum("qk,mkd->mqd", QUAD_BARY, p)


def _coefficients_at_quad(op: OperatorSpec, mesh: Mesh):
    m = mesh.n_elements
    xq = quad_points(mesh)
    A = np.empty((m, 3, 2, 2))
    b = np.empty((m, 3, 2))
    c = np.empty((m, 3, 2))
    q = np.empty((m, 3))
    for r in np.unique(mesh.region):
        sel = mesh.region == r
        pts = xq[sel].reshape(-1, 2)
        Ar, br, cr, qr = op.at(pts, int(r))
        n = sel.sum()
        A[sel] = Ar.reshape(n, 3, 2, 2)
        b[sel] = br.reshape(n, 3, 2)
        c[sel] = cr.reshape(n, 3, 2)
        q[sel] = qr.reshape(n, 3)
    return A, b, c, q


def local_matrices(op: OperatorSpec, mesh: Mesh, with_mass: bool = False):
    """Element matrices K_e[i, j] = a(phi_j, phi_i) on each triangle."""
    G = mesh.gradients()              # (m, 3, 2)
    area = mesh.areas()
    A, b, c, q = _coefficients_at_quad(op, mesh)
    wa = area[:, None] * QUAD_W[None, :]          # (m, Q)
    phi = QUAD_BARY                               # (Q, 3): phi_k at quad point
    # ∫ A Dphi_j . Dphi_i
    K = np.einsum("mq,mqab,mjb,mia->mij", wa, A, G, G)
    # ∫ phi_j b . Dphi_i
    K += np.einsum("mq,qj,mqa,mia->mij", wa, phi, b, G)
    # ∫ (c . Dphi_j) phi_i
    K += np.einsum("mq,mqa,mja,qi->mij", wa, c, G, phi)
    # ∫ q phi_j phi_i
    K += np.einsum("mq,mq,qj,qi->mij", wa, q, phi, phi)
    if not with_mass:
        return K, None
    Mloc = np.einsum("mq,qj,qi->mij", wa, phi, phi)
    return K, Mloc


def _scatter(local: np.ndarray, conn: np.ndarray, n: int) -> sp.csr_matrix:
    rows = np.repeat(conn, 3, axis=1).ravel()
    cols = np.tile(conn, (1, 3)).ravel()
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def assemble(op: OperatorSpec, mesh: Mesh, with_mass: bool = False, conn: np.ndarray | None = None,
             n: int | None = None):
    """Global stiffness matrix (and the P1 mass matrix when requested)."""
    conn = mesh.triangles if conn is None else conn
    n = mesh.n_nodes if n is None else n
    K_loc, M_loc = local_matrices(op, mesh, with_mass)
    K = _scatter(K_loc, conn, n)
    if with_mass:
        return K, _scatter(M_loc, conn, n)
    return K


def stiffness_laplace(mesh: Mesh) -> sp.csr_matrix:
    G = mesh.gradients()
    K = np.einsum("m,mja,mia->mij", mesh.areas(), G, G)
    return _scatter(K, mesh.triangles, mesh.n_nodes)


def dirichlet_partition(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    bmask = np.zeros(mesh.n_nodes, dtype=bool)
    bmask[mesh.boundary_nodes] = True
    return np.flatnonzero(~bmask), np.flatnonzero(bmask)


# ---------------------------------------------------------------------------
# solution fields
# ---------------------------------------------------------------------------

@dataclass
class SolutionField:
    """Discrete solution stored as element-wise nodal values (m, 3)."""

    mesh: Mesh
    elem_values: np.ndarray
    op: OperatorSpec | None = None
    trace: str = ""
    residual: float = 0.0
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_nodal(cls, mesh: Mesh, values: np.ndarray, **kw) -> "SolutionField":
        return cls(mesh, np.asarray(values)[mesh.triangles], **kw)

    @property
    def flat(self) -> np.ndarray:
        return self.elem_values.ravel()

    def nodal(self, region: int | None = None) -> np.ndarray:
        """Nodal values; at duplicated nodes the value seen from ``region`` (default: any)."""
        out = np.full(self.mesh.n_nodes, np.nan)
        tris = self.mesh.triangles
        sel = np.ones(len(tris), dtype=bool) if region is None else self.mesh.region == region
        for k in range(3):
            out[tris[sel, k]] = self.elem_values[sel, k]
        return out

    def combine(self, other: "SolutionField", a: float = 1.0, b: float = 1.0) -> "SolutionField":
        return SolutionField(self.mesh, a * self.elem_values + b * other.elem_values, self.op,
                             f"{a}*({self.trace}) + {b}*({other.trace})")

    def scaled(self, a: float) -> "SolutionField":
        return SolutionField(self.mesh, a * self.elem_values, self.op, f"{a}*({self.trace})")

    def __add__(self, other):
        return self.combine(other)

    def __sub__(self, other):
        return self.combine(other, 1.0, -1.0)

    def h1_norm(self) -> float:
        return h1_norm(self.mesh, self.elem_values)


def combination(fields: list[SolutionField], coeffs: np.ndarray, label: str = "") -> SolutionField:
    vals = np.tensordot(np.asarray(coeffs, dtype=float), np.stack([f.elem_values for f in fields]), axes=1)
    return SolutionField(fields[0].mesh, vals, fields[0].op, label)


def h1_norm(mesh: Mesh, elem_values: np.ndarray) -> float:
    """Broken H^1 norm of an element-wise P1 field."""
    G = mesh.gradients()
    area = mesh.areas()
    grad = np.einsum("mk,mkd->md", elem_values, G)
    vq = elem_values @ QUAD_BARY.T
    l2 = np.sum(area[:, None] * QUAD_W * vq ** 2)
    return float(np.sqrt(l2 + np.sum(area * (grad ** 2).sum(1))))


def l2_error(u: SolutionField, exact: Callable[[np.ndarray, int], np.ndarray]) -> float:
    """L^2 norm of u - exact with the 3-point rule; exact(points, region)."""
    mesh = u.mesh
    xq = quad_points(mesh)
    vq = u.elem_values @ QUAD_BARY.T
    err2 = 0.0
    area = mesh.areas()
    for r in np.unique(mesh.region):
        sel = mesh.region == r
        ex = exact(xq[sel].reshape(-1, 2), int(r)).reshape(-1, 3)
        err2 += np.sum(area[sel, None] * QUAD_W * (vq[sel] - ex) ** 2)
    return float(np.sqrt(err2))


# ---------------------------------------------------------------------------
# Dirichlet solves
# ---------------------------------------------------------------------------

class DirichletProblem:
    """Assembled L u = 0 with Dirichlet data on the outer boundary, reusable across traces."""

    def __init__(self, op: OperatorSpec, mesh: Mesh, method: str = "auto", tol: float = 1e-12):
        self.op = op
        self.mesh = mesh
        self.K = assemble(op, mesh)
        self.interior, self.boundary = dirichlet_partition(mesh)
        self.K_II = self.K[self.interior][:, self.interior]
        self.K_IB = self.K[self.interior][:, self.boundary]
        self.solver = LinearSolver(self.K_II, method=method, tol=tol)

    def boundary_values(self, g) -> np.ndarray:
        return _as_trace(g)(self.mesh.points[self.boundary])

    def solve_values(self, gB: np.ndarray, rhs_I: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Nodal solutions for boundary data gB of shape (nB,) or (nB, k)."""
        gB = np.asarray(gB, dtype=float)
        rhs = -(self.K_IB @ gB)
        if rhs_I is not None:
            rhs = rhs + rhs_I
        uI = self.solver.solve(rhs)
        u = np.zeros((self.mesh.n_nodes,) + gB.shape[1:])
        u[self.interior] = uI
        u[self.boundary] = gB
        res = np.linalg.norm((self.K_II @ uI - rhs).reshape(len(rhs), -1), axis=0)
        scale = np.maximum(np.linalg.norm(rhs.reshape(len(rhs), -1), axis=0),
                           np.linalg.norm((self.K_II @ uI).reshape(len(rhs), -1), axis=0))
        rel = np.where(scale > 0, res / np.where(scale > 0, scale, 1.0), 0.0)
        return u, rel

    def solve(self, g, label: str | None = None) -> SolutionField:
        u, rel = self.solve_values(self.boundary_values(g))
        return SolutionField.from_nodal(self.mesh, u, op=self.op, trace=label or getattr(g, "source", repr(g)),
                                        residual=float(rel.max()))

    def solve_many(self, traces: list, labels: list[str] | None = None) -> list[SolutionField]:
        gB = np.stack([self.boundary_values(g) for g in traces], axis=1)
        u, rel = self.solve_values(gB)
        labels = labels or [getattr(g, "source", repr(g)) for g in traces]
        return [SolutionField.from_nodal(self.mesh, u[:, k], op=self.op, trace=labels[k], residual=float(rel[k]))
                for k in range(u.shape[1])]


def solve_dirichlet(op: OperatorSpec, mesh: Mesh, g, method: str = "auto") -> SolutionField:
    """Solve L u = 0 in the domain with u = g on the outer boundary."""
    return DirichletProblem(op, mesh, method).solve(g)


# ---------------------------------------------------------------------------
# prescribed-jump (transmission) solves
# ---------------------------------------------------------------------------

def cracked_connectivity(mesh: Mesh, circle_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Connectivity with the interface nodes duplicated on the parent (outer) side.

    Returns (conn, sigma) where sigma are the original interface node ids;
    the duplicate of sigma[k] has id n + k.
    """
    if circle_id not in mesh.interface_nodes:
        raise KeyError(f"circle {circle_id} is not an interface of this mesh")
    sigma = mesh.interface_nodes[circle_id]
    outer_region = mesh.scene.parent[circle_id]
    n = mesh.n_nodes
    dup = np.full(n, -1)
    dup[sigma] = n + np.arange(len(sigma))
    conn = mesh.triangles.copy()
    sel = mesh.region == outer_region
    sub = conn[sel]
    hit = dup[sub] >= 0
    sub[hit] = dup[sub[hit]]
    conn[sel] = sub
    return conn, sigma


def interface_load(mesh: Mesh, circle_id: int, flux) -> np.ndarray:
    """∫_Σ flux * phi_i over the polygonal interface (two-point Gauss per edge)."""
    flux = _as_trace(flux)
    edges = mesh.interface_edges[circle_id]
    pa, pb = mesh.points[edges[:, 0]], mesh.points[edges[:, 1]]
    length = np.linalg.norm(pb - pa, axis=1)
    load = np.zeros(mesh.n_nodes)
    for s in (0.5 - 0.5 / np.sqrt(3), 0.5 + 0.5 / np.sqrt(3)):
        x = (1 - s) * pa + s * pb
        f = flux(x) * 0.5 * length
        np.add.at(load, edges[:, 0], f * (1 - s))
        np.add.at(load, edges[:, 1], f * s)
    return load


def solve_transmission(op: OperatorSpec, mesh: Mesh, circle_id: int, jump_u, jump_flux, g,
                       method: str = "auto") -> SolutionField:
    """Solve L S = 0 off Σ with [S] = jump_u and [(A DS + b S).n] = jump_flux on Σ, S = g on ∂Ω.

    Σ is the circle ``circle_id``; [w] is the value on the parent side
    minus the value on the circle side and n points into the parent side.
    """
    conn, sigma = cracked_connectivity(mesh, circle_id)
    n, ns = mesh.n_nodes, len(sigma)
    n_ext = n + ns
    K_ext = assemble(op, mesh, conn=conn, n=n_ext)
    # extended dofs = C @ continuous dofs + lifting
    rows = np.r_[np.arange(n), n + np.arange(ns)]
    cols = np.r_[np.arange(n), sigma]
    C = sp.csr_matrix((np.ones(n + ns), (rows, cols)), shape=(n_ext, n))
    w = np.zeros(n_ext)
    w[n:] = _as_trace(jump_u)(mesh.points[sigma])
    load = -interface_load(mesh, circle_id, jump_flux)
    K = (C.T @ K_ext @ C).tocsr()
    F = load - C.T @ (K_ext @ w)
    interior, boundary = dirichlet_partition(mesh)
    gB = _as_trace(g)(mesh.points[boundary])
    K_II = K[interior][:, interior]
    rhs = F[interior] - K[interior][:, boundary] @ gB
    uI = LinearSolver(K_II, method=method).solve(rhs)
    u = np.zeros(n)
    u[interior] = uI
    u[boundary] = gB
    res = np.linalg.norm(K_II @ uI - rhs) / max(np.linalg.norm(rhs), np.linalg.norm(K_II @ uI), 1e-300)
    u_ext = C @ u + w
    return SolutionField(mesh, u_ext[conn], op, trace=f"transmission(circle={circle_id})",
                         residual=float(res), meta={"circle": circle_id})


def transmission_flux_residual(op: OperatorSpec, u: SolutionField, circle_id: int, jump_flux) -> float:
    """Discrete natural-condition defect: max over Σ nodes of |a(S, phi_i) + ∫ jump_flux phi_i|, scaled by 1/h."""
    mesh = u.mesh
    K_loc, _ = local_matrices(op, mesh)
    r_loc = np.einsum("mij,mj->mi", K_loc, u.elem_values)
    r = np.zeros(mesh.n_nodes)
    np.add.at(r, mesh.triangles.ravel(), r_loc.ravel())
    r += interface_load(mesh, circle_id, jump_flux)
    sigma = mesh.interface_nodes[circle_id]
    return float(np.abs(r[sigma]).max() / mesh.h)


# ---------------------------------------------------------------------------
# spectral probes
# ---------------------------------------------------------------------------

def smallest_relative_singular_value(K: sp.spmatrix) -> float:
    """sigma_min / sigma_max of a sparse square matrix (0 when singular)."""
    K = sp.csc_matrix(K)
    try:
        lu = spla.splu(K)
    except RuntimeError:
        return 0.0
    n = K.shape[0]
    inv = spla.LinearOperator((n, n), matvec=lu.solve, rmatvec=lambda x: lu.solve(x, trans="T"),
                              dtype=float)
    v0 = np.ones(n) / np.sqrt(n)
    smax_inv = spla.svds(inv, k=1, return_singular_vectors=False, v0=v0, tol=1e-6)[0]
    smax = spla.svds(K, k=1, return_singular_vectors=False, v0=v0, tol=1e-6)[0]
    if not np.isfinite(smax_inv) or smax_inv == 0:
        return 0.0
    return float((1.0 / smax_inv) / smax)


def generalized_eigs_near_zero(K: sp.spmatrix, M: sp.spmatrix, k: int = 6) -> np.ndarray:
    """Eigenvalues mu of K v = mu M v closest to 0 (shift-invert)."""
    k = min(k, K.shape[0] - 2)
    sym = abs(K - K.T).max() <= 1e-13 * abs(K).max()
    try:
        if sym:
            return spla.eigsh(K, k=k, M=M, sigma=0.0, which="LM", return_eigenvectors=False)
        return spla.eigs(K, k=k, M=M, sigma=0.0, which="LM", return_eigenvectors=False)
    except RuntimeError:
        # exactly singular: 0 is an eigenvalue
        return np.zeros(1)


def coercivity_ratio(op: OperatorSpec, mesh: Mesh) -> float:
    """min over H^1_0 of <L u, u> / ||Du||^2 on ``mesh`` (all boundary nodes Dirichlet)."""
    K = assemble(op, mesh)
    S = stiffness_laplace(mesh)
    interior, _ = dirichlet_partition(mesh)
    Ks = 0.5 * (K + K.T)[interior][:, interior]
    Si = S[interior][:, interior]
    try:
        mu = spla.eigsh(Ks.tocsc(), k=1, M=Si.tocsc(), sigma=-10.0, which="LM", return_eigenvectors=False)
    except (RuntimeError, spla.ArpackNoConvergence) as exc:
        raise SingularSystemError(str(exc)) from exc
    return float(np.min(mu))
