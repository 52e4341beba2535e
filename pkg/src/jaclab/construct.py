"""Constructing admissible solution families.

The pipeline per cover center x:

1. closed-form local solutions of the frozen-coefficient operator at x,
   whose generalized Jacobian at x is the identity;
2. a least-squares fit of those local solutions by global discrete
   solutions (Fourier boundary traces) of the shifted operator;
3. re-solving with the same boundary traces under the unshifted operator.

Centers come from a hexagonal ball cover, refined where samples are not
yet certified.  The union of all fitted triples is then shrunk by random
projections.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .coefficients import CoefficientSet, OperatorSpec, ShiftReport, coercivity_shift, make_operator
from .geometry import Scene
from .jacobian import D, FamilyProbe, JacobianReport, ReductionError, fast_margin, p_star, \
    reduce_matrices, reduce_once, report_from_matrices
from .solver.evaluate import Sampler
from .solver.fem import DirichletProblem, SolutionField
from .solver.mesh import Mesh

log = logging.getLogger(__name__)

TSVD_RTOL = 1e-8


# ---------------------------------------------------------------------------
# local seeds
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OdeSolution:
    """Solutions of a f'' - beta f' - gamma f = 0 with f(0)=0, f'(0)=1 and g(0)=1, g'(0)=0.

    Written as f = e^{mu t} s(t) and g = e^{mu t} (c(t) - mu s(t)) where
    mu = beta / (2a), k = mu^2 + gamma / a and (s, c) is (sinh, cosh) scaled
    for k > 0, (sin, cos) for k < 0 and (t, 1) for k = 0.
    """

    a: float
    beta: float
    gamma: float

    @property
    def mu(self) -> float:
        return self.beta / (2.0 * self.a)

    @property
    def k(self) -> float:
        return self.mu ** 2 + self.gamma / self.a

    @property
    def branch(self) -> str:
        return "real" if self.k > 0 else ("complex" if self.k < 0 else "double")

    def roots(self) -> tuple[complex, complex]:
        disc = np.sqrt(complex(self.k))
        return self.mu + disc, self.mu - disc

    def _sc(self, t):
        k = self.k
        if k > 0:
            w = math.sqrt(k)
            return np.sinh(w * t) / w, np.cosh(w * t)
        if k < 0:
            w = math.sqrt(-k)
            return np.sin(w * t) / w, np.cos(w * t)
        return np.asarray(t, dtype=float), np.ones_like(t, dtype=float)

    def f(self, t, nu: int = 0):
        """nu-th derivative (0, 1, 2) of f."""
        t = np.asarray(t, dtype=float)
        s, c = self._sc(t)
        e = np.exp(self.mu * t)
        mu, k = self.mu, self.k
        if nu == 0:
            return e * s
        if nu == 1:
            return e * (mu * s + c)
        return e * ((mu * mu + k) * s + 2 * mu * c)

    def g(self, t, nu: int = 0):
        t = np.asarray(t, dtype=float)
        s, c = self._sc(t)
        e = np.exp(self.mu * t)
        mu, k = self.mu, self.k
        if nu == 0:
            return e * (c - mu * s)
        if nu == 1:
            return e * (k - mu * mu) * s
        return e * (k - mu * mu) * (mu * s + c)


@dataclass
class LocalSeed:
    """Three closed-form solutions of the frozen operator around an anchor point.

    u_i(y) = f_i(y_i - x_i) for i = 1, 2 and u_3(y) = g_1(y_1 - x_1).
    """

    anchor: np.ndarray
    region: int
    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    q: float
    odes: tuple[OdeSolution, OdeSolution]
    eps: float = 0.0
    sigma: float = 0.0

    def _parts(self, pts):
        t = np.atleast_2d(np.asarray(pts, dtype=float)) - self.anchor
        return t[:, 0], t[:, 1]

    def values(self, pts) -> np.ndarray:
        t1, t2 = self._parts(pts)
        o1, o2 = self.odes
        return np.c_[o1.f(t1), o2.f(t2), o1.g(t1)]

    def gradients(self, pts) -> np.ndarray:
        """(n, 3, 2)."""
        t1, t2 = self._parts(pts)
        o1, o2 = self.odes
        z = np.zeros_like(t1)
        return np.stack([np.c_[o1.f(t1, 1), z], np.c_[z, o2.f(t2, 1)], np.c_[o1.g(t1, 1), z]], axis=1)

    def hessian_diagonals(self, pts) -> np.ndarray:
        """(n, 3, 2) second derivatives d11, d22 (mixed derivatives vanish)."""
        t1, t2 = self._parts(pts)
        o1, o2 = self.odes
        z = np.zeros_like(t1)
        return np.stack([np.c_[o1.f(t1, 2), z], np.c_[z, o2.f(t2, 2)], np.c_[o1.g(t1, 2), z]], axis=1)

    def jacobians(self, pts) -> np.ndarray:
        """(n, 3, 3) generalized Jacobians with rows (Du_i, u_i)."""
        return np.concatenate([self.gradients(pts), self.values(pts)[..., None]], axis=2)

    def det(self, pts) -> np.ndarray:
        return np.linalg.det(self.jacobians(pts))

    def residual(self, pts) -> np.ndarray:
        """Frozen operator applied to each seed component, relative to the size of its terms, (n, 3)."""
        H = self.hessian_diagonals(pts)
        G = self.gradients(pts)
        V = self.values(pts)
        second = -(self.A[0, 0] * H[..., 0] + self.A[1, 1] * H[..., 1])
        first = np.einsum("npi,i->np", G, self.c - self.b)
        zeroth = self.q * V
        scale = np.abs(second) + np.abs(first) + np.abs(zeroth) + 1e-300
        return np.abs(second + first + zeroth) / np.maximum(scale, 1.0)


def local_ode_solutions(op: OperatorSpec, x, region: int | None = None, scene: Scene | None = None) -> LocalSeed:
    """Seeds for the operator with coefficients frozen at x (shift included)."""
    x = np.asarray(x, dtype=float)
    if region is None:
        if scene is None:
            raise ValueError("need a region or a scene")
        region = int(scene.region_of(x[None])[0])
        if region == 0:
            raise ValueError("anchor outside the domain")
    A, b, c, q = op.at(x[None], region)
    A, b, c, q = A[0], b[0], c[0], float(q[0])
    odes = []
    for i in range(D):
        a = float(A[i, i])
        if not a > 0:
            raise ValueError("non-positive diagonal coefficient")
        # -a f'' + (c_i - b_i) f' + q f = 0
        odes.append(OdeSolution(a, float(c[i] - b[i]), q))
    return LocalSeed(x, region, A, b, c, q, tuple(odes))


# ---------------------------------------------------------------------------
# Runge dictionary and fit
# ---------------------------------------------------------------------------

class FourierTrace:
    """cos(k theta), sin(k theta) or 1 with theta the polar angle about ``center``."""

    def __init__(self, k: int, kind: str, center):
        self.k, self.kind, self.center = k, kind, np.asarray(center, dtype=float)
        self.source = "1" if k == 0 else f"{kind}({k}*theta)"

    def __call__(self, pts):
        v = np.atleast_2d(pts) - self.center
        th = np.arctan2(v[:, 1], v[:, 0])
        if self.k == 0:
            return np.ones(len(v))
        return np.cos(self.k * th) if self.kind == "cos" else np.sin(self.k * th)


def fourier_traces(m: int, center) -> list[FourierTrace]:
    """The constant and cos/sin(k theta) for 1 <= k <= m/2 (nested in m)."""
    out = [FourierTrace(0, "cos", center)]
    for k in range(1, m // 2 + 1):
        out += [FourierTrace(k, "cos", center), FourierTrace(k, "sin", center)]
    return out


class RungeDictionary:
    """Global discrete solutions of one operator for a fixed list of boundary traces."""

    def __init__(self, op: OperatorSpec, mesh: Mesh, m: int, problem: DirichletProblem | None = None):
        if m < 2:
            raise ValueError("dictionary size must be at least 2")
        self.op, self.mesh, self.m = op, mesh, m
        self.traces = fourier_traces(m, mesh.scene.outer.centroid if mesh.scene else (0.0, 0.0))
        problem = problem or DirichletProblem(op, mesh)
        self.fields = problem.solve_many(self.traces, [t.source for t in self.traces])
        self.values = np.stack([f.elem_values.reshape(-1) for f in self.fields], axis=1)   # (3m_el, K)

    @property
    def size(self) -> int:
        return len(self.fields)

    def combine(self, coeffs: np.ndarray, labels: list[str] | None = None) -> list[SolutionField]:
        coeffs = np.asarray(coeffs, dtype=float).reshape(self.size, -1)
        vals = self.values @ coeffs
        shape = self.fields[0].elem_values.shape
        labels = labels or [f"runge[{j}]" for j in range(coeffs.shape[1])]
        return [SolutionField(self.mesh, vals[:, j].reshape(shape), self.op, labels[j]) for j in range(coeffs.shape[1])]


def tsvd_solve(M: np.ndarray, T: np.ndarray, rtol: float = TSVD_RTOL) -> np.ndarray:
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    keep = s > rtol * s[0]
    return Vt[keep].T @ ((U[:, keep].T @ T) / s[keep, None])


@dataclass
class FitResult:
    coeffs: np.ndarray          # (K, 3) over the dictionary
    error: float                # max over components of relative (u, Du) residual on the fit points
    n_points: int


def fit_seed(dict_jac: np.ndarray, seed_jac: np.ndarray) -> FitResult:
    """Least-squares fit of seed Jacobian rows by dictionary Jacobian rows.

    dict_jac: (n, K, 3) dictionary (Du, u) at fit points; seed_jac: (n, 3, 3).
    """
    n, K, _ = dict_jac.shape
    M = dict_jac.transpose(0, 2, 1).reshape(3 * n, K)
    T = seed_jac.transpose(0, 2, 1).reshape(3 * n, 3)
    scale = np.linalg.norm(M, axis=0)
    scale[scale == 0] = 1.0
    C = tsvd_solve(M / scale, T) / scale[:, None]
    err = np.linalg.norm(M @ C - T, axis=0) / np.maximum(np.linalg.norm(T, axis=0), 1e-300)
    return FitResult(C, float(err.max()), n)


def fit_points(scene: Scene, center, radius: float, region: int, spacing: float, tube: float) -> np.ndarray:
    pts = scene.grid(spacing, tube_halfwidth=tube)
    sel = (np.linalg.norm(pts - center, axis=1) <= radius) & (scene.region_of(pts) == region)
    return pts[sel]


def runge_fit(op: OperatorSpec, mesh: Mesh, seed: LocalSeed, m: int, radius: float,
              dictionary: RungeDictionary | None = None) -> tuple[list[SolutionField], FitResult]:
    """Global discrete solutions approximating the seed on B(anchor, radius) within its region."""
    dictionary = dictionary or RungeDictionary(op, mesh, m)
    pts = fit_points(mesh.scene, seed.anchor, radius, seed.region, mesh.h, 2 * mesh.h)
    if len(pts) < 4:
        pts = np.atleast_2d(seed.anchor)
    s = Sampler.build(mesh, pts, seed.region)
    fit = fit_seed(s.jacobians(dictionary.fields), seed.jacobians(pts))
    return dictionary.combine(fit.coeffs, [f"fit[{i}]@{tuple(np.round(seed.anchor, 4))}" for i in range(3)]), fit


# ---------------------------------------------------------------------------
# ball cover
# ---------------------------------------------------------------------------

def cover_bound(scene: Scene, eps: float) -> int:
    return int(math.floor((scene.diameter / eps) ** 2)) + 1


def hex_lattice(anchor, eps: float, extent: float) -> np.ndarray:
    """Hexagonal lattice with covering radius eps, ordered by distance to the anchor."""
    a = math.sqrt(3.0) * eps
    n = int(math.ceil(extent / a)) + 2
    i, j = np.meshgrid(np.arange(-n, n + 1), np.arange(-n, n + 1))
    pts = np.c_[(i + 0.5 * j).ravel() * a, (j * math.sqrt(3.0) / 2).ravel() * a] + np.asarray(anchor)
    d = np.linalg.norm(pts - anchor, axis=1)
    order = np.lexsort((pts[:, 1], pts[:, 0], np.round(d, 12)))
    return pts[order]


def cover_assignment(samples: np.ndarray, eps: float, anchor) -> tuple[np.ndarray, np.ndarray]:
    """Centers and, for each sample, the index of the first center (in lattice order) within eps."""
    anchor = np.asarray(anchor, dtype=float)
    extent = np.linalg.norm(samples - anchor, axis=1).max(initial=0.0) + eps
    lat = hex_lattice(anchor, eps, extent)
    owner = np.full(len(samples), -1)
    for k, c in enumerate(lat):
        free = owner < 0
        if not np.any(free):
            break
        hit = free & (np.linalg.norm(samples - c, axis=1) <= eps * (1 + 1e-12))
        owner[hit] = k
    used = np.unique(owner)
    remap = np.full(len(lat), -1)
    remap[used] = np.arange(len(used))
    return lat[used], remap[owner]


def ball_cover(scene: Scene, eps: float, samples: np.ndarray | None = None) -> np.ndarray:
    """Centers of eps-balls covering the grid samples of the domain."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if samples is None:
        samples = scene.grid(min(eps / 4, scene.diameter / 64))
    centers, _ = cover_assignment(samples, eps, scene.outer.centroid)
    return centers


# ---------------------------------------------------------------------------
# certification arithmetic
# ---------------------------------------------------------------------------

def multilinear_bound(JU: np.ndarray, JV: np.ndarray) -> float:
    """Upper bound for |det U - det V| over stacks of square matrices.

    Telescoping over rows and Hadamard's inequality give
    (d+1) * M^d * delta with M the largest row norm of either matrix and
    delta the largest row difference norm.
    """
    k = JU.shape[-1]
    M = max(np.linalg.norm(JU, axis=-1).max(), np.linalg.norm(JV, axis=-1).max())
    delta = np.linalg.norm(JU - JV, axis=-1).max()
    return float(k * M ** (k - 1) * delta)


def gradient_only_bound(JU: np.ndarray, JV: np.ndarray) -> float:
    """(d+1)(sum_i |Du_i| + |Dv_i|)^d max_i |Du_i - Dv_i|, which ignores the value column."""
    k = JU.shape[-1]
    s = (np.linalg.norm(JU[..., :-1], axis=-1) + np.linalg.norm(JV[..., :-1], axis=-1)).sum(axis=-1).max()
    delta = np.linalg.norm(JU[..., :-1] - JV[..., :-1], axis=-1).max()
    return float(k * s ** (k - 1) * delta)


def certified_radius(dist: np.ndarray, seed_det: np.ndarray, JU: np.ndarray, JV: np.ndarray,
                     sigma: float) -> tuple[float, np.ndarray]:
    """Largest radius eps such that seed_det - bound(eps) > sigma on every sample within eps.

    The bound is the multilinear bound over samples within eps (monotone
    in eps), so the search runs over samples sorted by distance.  Returns
    (eps, per-sample certified mask).
    """
    order = np.argsort(dist, kind="stable")
    k = JU.shape[-1]
    M = np.maximum.accumulate(np.maximum(np.linalg.norm(JU[order], axis=-1).max(-1),
                                         np.linalg.norm(JV[order], axis=-1).max(-1)))
    delta = np.maximum.accumulate(np.linalg.norm(JU[order] - JV[order], axis=-1).max(-1))
    bound = k * M ** (k - 1) * delta
    worst = np.minimum.accumulate(seed_det[order]) - bound
    good = worst > sigma
    n_ok = len(good) if np.all(good) else int(np.argmin(good))
    mask = np.zeros(len(dist), dtype=bool)
    mask[order[:n_ok]] = True
    eps = float(dist[order[n_ok - 1]]) if n_ok else 0.0
    return eps, mask


# ---------------------------------------------------------------------------
# family construction
# ---------------------------------------------------------------------------

@dataclass
class CenterRecord:
    anchor: tuple[float, float]
    region: int
    round: int
    cover_eps: float
    eps: float
    members: int
    certified: int
    fit_error: float
    min_pre_det: float
    min_post_det: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class AdmissibleFamily:
    fields: list[SolutionField]
    centers: list[CenterRecord]
    coeffs: np.ndarray                      # (K, P) over the unshifted dictionary
    report: JacobianReport
    shift: ShiftReport | None
    sigma: float
    P0: int
    reduction: list[dict] = field(default_factory=list)
    shift_back_constant: float = 0.0
    uncovered: int = 0
    provenance: list[dict] = field(default_factory=list)

    @property
    def P(self) -> int:
        return len(self.fields)

    @property
    def certified(self) -> bool:
        return self.uncovered == 0 and self.report.admissible and self.report.margin >= self.sigma / 2

    def summary(self) -> dict:
        return {"P0": self.P0, "P": self.P, "sigma": self.sigma, "certified": self.certified,
                "margin": self.report.margin, "grid_margin": self.report.grid_margin(),
                "probe_margin": self.report.probe_margin(), "n_centers": len(self.centers),
                "uncovered": self.uncovered, "shift_back_constant": self.shift_back_constant,
                "kappa": self.shift.kappa if self.shift else 0.0, "reduction": self.reduction}


def build_admissible_family(scene: Scene, coeffs: CoefficientSet, mesh: Mesh, sigma: float = 0.5,
                            dict_size: int = 32, eps0: float | None = None, max_rounds: int = 6,
                            seed: int = 0, reduce_to: int | None = None, shift: ShiftReport | None = None,
                            retry_cap: int = 20) -> AdmissibleFamily:
    """Admissible family for the unshifted operator, certified at margin sigma/2 on the standard samples.

    ``reduce_to`` defaults to P* (no reduction when the union is already
    that small); pass 0 to skip reduction.
    """
    op = make_operator(coeffs)
    if shift is None:
        shift = coercivity_shift(coeffs, scene, mesh)
    kappa = shift.kappa
    op_k = op.with_kappa(kappa)
    dict_k = RungeDictionary(op_k, mesh, dict_size)
    dict_0 = RungeDictionary(op, mesh, dict_size)
    probe = FamilyProbe.standard(mesh)
    samples = probe.samples
    DJ_k = probe.sampler.jacobians(dict_k.fields)      # (n, K, 3)
    DJ_0 = probe.sampler.jacobians(dict_0.fields)
    n = samples.n
    covered = np.zeros(n, dtype=bool)
    eps = eps0 or scene.diameter / 2
    centroid = np.asarray(scene.outer.centroid, dtype=float)
    records: list[CenterRecord] = []
    blocks: list[np.ndarray] = []
    provenance: list[dict] = []
    shift_diffs = []
    for rnd in range(max_rounds):
        pending = np.flatnonzero(~covered)
        if len(pending) == 0:
            break
        centers, owner = cover_assignment(samples.points[pending], eps, centroid)
        for ci, c in enumerate(centers):
            members = pending[owner == ci]
            # anchor: lattice point if it lies on a member's side and in the domain, else nearest member
            near = members[np.argmin(np.linalg.norm(samples.points[members] - c, axis=1))]
            region = int(samples.sides[near])
            in_dom = scene.region_of(c[None])[0] == region and \
                scene.interface_distance(c[None])[0] > 2 * mesh.h and samples.kinds[near] == 0
            anchor = c if in_dom else samples.points[near]
            same = members[samples.sides[members] == region]
            seed_ = local_ode_solutions(op_k, anchor, region)
            fit_pts = samples.points[same]
            fit_J = DJ_k[same]
            if len(same) < 4:
                fit_pts = np.vstack([fit_pts, anchor])
                fit_J = np.concatenate([fit_J, Sampler.build(mesh, anchor[None], region).jacobians(dict_k.fields)])
            fit = fit_seed(fit_J, seed_.jacobians(fit_pts))
            JV = np.einsum("nkj,ki->nij", DJ_k[same], fit.coeffs)
            JU = seed_.jacobians(samples.points[same])
            dist = np.linalg.norm(samples.points[same] - anchor, axis=1)
            eps_c, mask = certified_radius(dist, np.linalg.det(JU), JU, JV, sigma)
            pre_det = np.linalg.det(JV)
            JW = np.einsum("nkj,ki->nij", DJ_0[same], fit.coeffs)
            post_det = np.linalg.det(JW)
            ok = mask & (pre_det > sigma) & (np.abs(post_det) > sigma / 2)
            shift_diffs.append(np.abs(post_det - pre_det).max(initial=0.0))
            covered[same[ok]] = True
            records.append(CenterRecord((float(anchor[0]), float(anchor[1])), region, rnd, eps, eps_c,
                                        len(members), int(ok.sum()), fit.error,
                                        float(pre_det.min(initial=np.inf)), float(post_det.min(initial=np.inf))))
            if ok.any():
                blocks.append(fit.coeffs)
                provenance.append({"anchor": records[-1].anchor, "region": region, "round": rnd,
                                   "fit_error": fit.error, "kappa": kappa,
                                   "traces": [t.source for t in dict_0.traces]})
        log.info("round %d: eps=%.4g centers=%d uncovered=%d", rnd, eps, len(centers), int((~covered).sum()))
        eps /= 2
    if not blocks:
        raise ReductionError("no center certified any sample")
    C = np.concatenate(blocks, axis=1)                 # (K, P0)
    P0 = C.shape[1]
    J = np.einsum("nkj,kp->npj", DJ_0, C)
    target = p_star() if reduce_to is None else reduce_to
    rng = np.random.default_rng(seed)
    steps = []
    while target and C.shape[1] > max(target, D + 1):
        try:
            step = reduce_once(J, rng, retry_cap, min_margin=sigma / 2)
        except ReductionError as exc:
            log.warning("reduction stopped at P=%d: %s", C.shape[1], exc)
            steps.append({"P": int(C.shape[1]), "stopped": str(exc)})
            break
        C = C[:, :-1] - step.a[None, :] * C[:, -1:]
        J = reduce_matrices(J, step.a)
        steps.append({"P": int(C.shape[1]), "a": step.a.tolist(), "margin": step.margin,
                      "attempts": step.attempts, "sandwich_ok": step.sandwich_ok})
    fields = dict_0.combine(C, [f"family[{j}]" for j in range(C.shape[1])])
    report = report_from_matrices(samples, J)
    return AdmissibleFamily(fields, records, C, report, shift, sigma, P0, steps,
                            float(max(shift_diffs, default=0.0) / kappa) if kappa > 0 else 0.0,
                            int((~covered).sum()), provenance)
