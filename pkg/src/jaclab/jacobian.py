"""Generalized Jacobians, flux Jacobians, determinant margins and random reduction.

For a family u_1..u_P the generalized Jacobian at x is the P x 3 matrix
with rows (Du_l(x), u_l(x)).  Its determinant margin is the sum of the
absolute values of all 3 x 3 minors, which is positive exactly when the
matrix has full rank.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import partial
from itertools import combinations

import numpy as np

from .coefficients import OperatorSpec
from .frames import FrameField, dstar, t_matrix_batch
from .geometry import Scene
from .solver.evaluate import Sampler
from .solver.fem import SolutionField

D = 2
RANK_RTOL = 1e-8


def p_star(d: int = D, alpha: float = 1.0) -> int:
    """Smallest family size for which reduction is guaranteed: floor((d + d* + 1) / alpha)."""
    return int(math.floor((d + dstar(d) + 1) / alpha + 1e-12))


# ---------------------------------------------------------------------------
# matrix-level helpers (work on stacks of P x (d+1) matrices)
# ---------------------------------------------------------------------------

def minor_sum(J: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Sum over (d+1)-row subsets of |det| for J of shape (n, P, d+1)."""
    J = np.asarray(J, dtype=float)
    single = J.ndim == 2
    if single:
        J = J[None]
    n, P, k = J.shape
    if P < k:
        out = np.zeros(n)
        return out[0] if single else out
    combos = np.array(list(combinations(range(P), k)))
    out = np.empty(n)
    step = max(1, chunk * 400 // max(len(combos), 1))
    for s in range(0, n, step):
        sub = J[s:s + step][:, combos]            # (c, K, k, k)
        out[s:s + step] = np.abs(np.linalg.det(sub)).sum(axis=1)
    return out[0] if single else out


def margin_lower_bound(J: np.ndarray) -> np.ndarray:
    """sqrt(det J^T J): the root of the sum of squared minors, a lower bound for the minor sum.

    Cheap for large P where enumerating all minors is not.
    """
    G = np.einsum("...pi,...pj->...ij", J, J)
    return np.sqrt(np.clip(np.linalg.det(G), 0.0, None))


def fast_margin(J: np.ndarray, exact_up_to: int = 12) -> np.ndarray:
    """Exact minor sum for small families, the Gram lower bound otherwise."""
    return minor_sum(J) if J.shape[-2] <= exact_up_to else margin_lower_bound(J)


def ranks(J: np.ndarray, rtol: float = RANK_RTOL) -> np.ndarray:
    sv = np.linalg.svd(np.asarray(J, dtype=float), compute_uv=False)
    smax = sv[..., :1]
    return np.sum(sv > rtol * np.where(smax > 0, smax, 1.0), axis=-1) * (smax[..., 0] > 0)


def reduce_matrices(J: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Jacobians of (u_i - a_i u_P)_{i<P} from those of (u_i)_{i<=P}."""
    a = np.asarray(a, dtype=float)
    return J[..., :-1, :] - a[:, None] * J[..., -1:, :]


def degenerate_coefficients(Jx: np.ndarray, w: np.ndarray | None = None) -> np.ndarray:
    """Coefficients a making the reduced Jacobian at one point rank deficient.

    The reduced matrix annihilates w when J_{<P} w = a (J_P . w); any w with
    J_P . w != 0 works.
    """
    Jx = np.asarray(Jx, dtype=float)
    if w is None:
        w = Jx[-1] / np.dot(Jx[-1], Jx[-1])
    s = Jx[-1] @ w
    if abs(s) < 1e-14:
        raise ValueError("w is orthogonal to the last row")
    return Jx[:-1] @ w / s


# ---------------------------------------------------------------------------
# field-level evaluation
# ---------------------------------------------------------------------------

def _fields(us) -> list[SolutionField]:
    us = list(us)
    if not us:
        raise ValueError("empty family")
    mesh = us[0].mesh
    if any(u.mesh is not mesh for u in us):
        raise ValueError("all fields must share one mesh")
    return us


def jac_matrix(us, x, side="auto") -> np.ndarray:
    """Generalized Jacobian(s): (P, 3) for one point, (n, P, 3) for a point array."""
    us = _fields(us)
    x = np.asarray(x, dtype=float)
    pts = np.atleast_2d(x)
    J = Sampler.build(us[0].mesh, pts, side).jacobians(us)
    return J[0] if x.ndim == 1 else J


def flux_rows(J: np.ndarray, A: np.ndarray, b: np.ndarray, frames: np.ndarray) -> np.ndarray:
    """Flux Jacobians from generalized Jacobians, directly: ((A Du + b u).f1, Du.f2, u)."""
    Du, u = J[..., :2], J[..., 2]
    flux = np.einsum("nij,npj->npi", A, Du) + b[:, None, :] * u[..., None]
    out = np.empty_like(J)
    out[..., 0] = np.einsum("npi,ni->np", flux, frames[:, 0])
    out[..., 1] = np.einsum("npi,ni->np", Du, frames[:, 1])
    out[..., 2] = u
    return out


def flux_jacobians(us, frames: FrameField, op: OperatorSpec, pts, sides, via_t: bool = False) -> np.ndarray:
    """(n, P, 3) flux Jacobians of a family at points on given sides."""
    us = _fields(us)
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    sides = np.broadcast_to(np.asarray(sides), (len(pts),))
    J = Sampler.build(us[0].mesh, pts, sides).jacobians(us)
    A = np.empty((len(pts), 2, 2))
    b = np.empty((len(pts), 2))
    for r in np.unique(sides):
        sel = sides == r
        A[sel], b[sel], _, _ = op.at(pts[sel], int(r))
    F = frames(pts)
    if via_t:
        return np.einsum("npk,nkj->npj", J, t_matrix_batch(A, b, F))
    return flux_rows(J, A, b, F)


def flux_jac(u: SolutionField, frames: FrameField, op: OperatorSpec, x, side) -> np.ndarray:
    """Flux Jacobian row of one field at one point."""
    x = np.asarray(x, dtype=float)
    if isinstance(side, str):
        side = int(u.mesh.scene.region_of(x[None])[0])
    return flux_jacobians([u], frames, op, x[None], side)[0, 0]


# ---------------------------------------------------------------------------
# sample sets and reports
# ---------------------------------------------------------------------------

@dataclass
class SampleSet:
    """Grid points (kind 0) and interface probe points (kind 1) with their sides.

    Probe points come in pairs: ``pair[k]`` gives the index of the
    opposite-side partner (or -1 for grid points).
    """

    points: np.ndarray
    sides: np.ndarray
    kinds: np.ndarray
    pair: np.ndarray
    interface: np.ndarray

    @property
    def n(self) -> int:
        return len(self.points)


def interface_probes(scene: Scene, offset: float, k: int = 64, phase: float = 0.1):
    """Probe pairs x -+ offset*n at k points on every interface.

    Returns (inner_pts, outer_pts, inner_side, outer_side, circle_ids, base_points).
    """
    ins, outs, si, so, ids, base = [], [], [], [], [], []
    for itf in scene.interfaces():
        x = itf.points(k, phase)
        nrm = itf.normal(x)
        ins.append(x - offset * nrm)
        outs.append(x + offset * nrm)
        si.append(np.full(k, itf.i))
        so.append(np.full(k, itf.j))
        ids.append(np.full(k, itf.i))
        base.append(x)
    if not ins:
        e = np.zeros((0, 2))
        z = np.zeros(0, dtype=int)
        return e, e, z, z, z, e
    return (np.vstack(ins), np.vstack(outs), np.concatenate(si), np.concatenate(so),
            np.concatenate(ids), np.vstack(base))


def sample_set(scene: Scene, spacing: float, tube: float, probe_offset: float | None = None,
               n_probe: int = 64, margin: float = 0.0) -> SampleSet:
    grid = scene.grid(spacing, tube_halfwidth=tube, margin=margin)
    gs = scene.region_of(grid)
    pts, sides, kinds, pair, itf = [grid], [gs], [np.zeros(len(grid), int)], [np.full(len(grid), -1)], \
        [np.zeros(len(grid), int)]
    if probe_offset is not None and scene.N:
        pin, pout, si, so, ids, _ = interface_probes(scene, probe_offset, n_probe)
        n0, m = len(grid), len(pin)
        pts += [pin, pout]
        sides += [si, so]
        kinds += [np.ones(2 * m, int)]
        pair += [n0 + m + np.arange(m), n0 + np.arange(m)]
        itf += [ids, ids]
    return SampleSet(np.vstack(pts), np.concatenate(sides), np.concatenate(kinds),
                     np.concatenate(pair), np.concatenate(itf))


@dataclass
class JacobianReport:
    samples: SampleSet
    J: np.ndarray                  # (n, P, 3)
    rank: np.ndarray
    margins: np.ndarray            # per-sample minor sums (0 where rank deficient)
    flux_margins: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def P(self) -> int:
        return self.J.shape[1]

    @property
    def margin(self) -> float:
        return float(self.margins.min())

    @property
    def admissible(self) -> bool:
        return self.P >= D + 1 and bool(np.all(self.rank == D + 1)) and self.margin > 0

    def grid_margin(self) -> float:
        return float(self.margins[self.samples.kinds == 0].min(initial=np.inf))

    def probe_margin(self) -> float:
        return float(self.margins[self.samples.kinds == 1].min(initial=np.inf))

    def summary(self) -> dict:
        out = {"P": self.P, "n_samples": int(self.samples.n), "admissible": self.admissible,
               "margin": self.margin, "grid_margin": self.grid_margin(), "probe_margin": self.probe_margin(),
               "min_rank": int(self.rank.min())}
        if self.flux_margins is not None and len(self.flux_margins):
            out["flux_margin"] = float(self.flux_margins.min())
        out.update(self.meta)
        return out


def report_from_matrices(samples: SampleSet, J: np.ndarray, Jf: np.ndarray | None = None, **meta) -> JacobianReport:
    rk = ranks(J)
    m = minor_sum(J)
    m = np.where(rk == D + 1, m, 0.0)
    fm = minor_sum(Jf) if Jf is not None else None
    return JacobianReport(samples, J, rk, m, fm, dict(meta))


class FamilyProbe:
    """Evaluates families at a fixed sample set (operators are built once)."""

    def __init__(self, mesh, samples: SampleSet):
        if samples.n == 0:
            raise ValueError("empty sample set")
        self.mesh = mesh
        self.samples = samples
        self.sampler = Sampler.build(mesh, samples.points, samples.sides)

    @classmethod
    def standard(cls, mesh, spacing: float | None = None, tube: float | None = None,
                 probe_offset: float | None = None, n_probe: int = 64) -> "FamilyProbe":
        h = mesh.h
        spacing = spacing or h
        tube = 2 * h if tube is None else tube
        probe_offset = 2 * h if probe_offset is None else probe_offset
        return cls(mesh, sample_set(mesh.scene, spacing, tube, probe_offset, n_probe))

    def jacobians(self, us) -> np.ndarray:
        return self.sampler.jacobians(_fields(us))

    def report(self, us, frames: FrameField | None = None, op: OperatorSpec | None = None) -> JacobianReport:
        J = self.jacobians(us)
        Jf = None
        if frames is not None and op is not None:
            probe = self.samples.kinds == 1
            if np.any(probe):
                Jf = flux_jacobians(us, frames, op, self.samples.points[probe], self.samples.sides[probe])
        return report_from_matrices(self.samples, J, Jf)


def admissibility_margin(us, scene: Scene | None = None, frames: FrameField | None = None,
                         op: OperatorSpec | None = None, spacing: float | None = None,
                         tube: float | None = None, probe_offset: float | None = None,
                         n_probe: int = 64) -> JacobianReport:
    """Determinant margins of a family on a grid (minus interface tubes) plus interface probe pairs."""
    us = _fields(us)
    mesh = us[0].mesh
    if scene is not None and scene is not mesh.scene:
        mesh.scene = mesh.scene or scene
    return FamilyProbe.standard(mesh, spacing, tube, probe_offset, n_probe).report(us, frames, op)


# ---------------------------------------------------------------------------
# gradient subfamily
# ---------------------------------------------------------------------------

def gradient_subfamily_matrix(Jx: np.ndarray) -> tuple[tuple[int, ...], float]:
    Jx = np.asarray(Jx, dtype=float)
    if ranks(Jx[None])[0] < D + 1:
        raise ValueError("generalized Jacobian is rank deficient at this point")
    best, best_val = None, -1.0
    for idx in combinations(range(len(Jx)), D):
        val = abs(np.linalg.det(Jx[list(idx), :D]))
        if val > best_val * (1 + 1e-12):
            best, best_val = idx, val
    return best, best_val


def gradient_subfamily(us, x, side="auto") -> tuple[int, ...]:
    """Indices of d fields whose gradients have the largest |det| at x."""
    return gradient_subfamily_matrix(jac_matrix(us, x, side))[0]


# ---------------------------------------------------------------------------
# Whitney reduction
# ---------------------------------------------------------------------------

class ReductionError(RuntimeError):
    pass


@dataclass
class ReductionStep:
    a: np.ndarray
    margin: float
    attempts: int
    rejected: list[np.ndarray]
    sandwich_ok: bool


class ReductionScreen:
    """Fast admissibility test for one-step reductions of a fixed stack of Jacobians.

    Each 3 x 3 minor of the reduced matrix is affine in ``a``:
    det(J_i - a_i J_P, J_j - a_j J_P, J_k - a_k J_P) equals
    det(J_i, J_j, J_k) - a_i det(J_P, J_j, J_k) - a_j det(J_i, J_P, J_k) - a_k det(J_i, J_j, J_P),
    so the minors of J are computed once and every draw costs a few
    vector operations.  Full rank is certified through
    sigma_3 >= vol / sigma_1^2 with vol^2 the sum of squared minors and
    sigma_1^2 bounded by the squared Frobenius norm; draws the screen cannot
    certify are handed to the exact SVD test, so ``check`` agrees with
    ``try_reduction``.
    """

    MAX_P = 13

    def __init__(self, J: np.ndarray, rtol: float = RANK_RTOL):
        J = np.asarray(J, dtype=float)
        self.J = J
        self.rtol = rtol
        n, P, k = J.shape
        self.combos = np.array(list(combinations(range(P - 1), k)))
        last = J[:, -1, :]
        rows = J[:, self.combos]                     # (n, c, 3, 3)
        self.M0 = np.linalg.det(rows)
        self.Ms = []
        for pos in range(k):
            sub = rows.copy()
            sub[:, :, pos, :] = last[:, None, :]
            self.Ms.append(np.linalg.det(sub))
        self.sq = np.einsum("npk,npk->np", J[:, :-1], J[:, :-1])
        self.cross = np.einsum("npk,nk->np", J[:, :-1], last)
        self.pp = np.einsum("nk,nk->n", last, last)

    def screen(self, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(minor sums, certified-full-rank mask) of the reduced stack."""
        a = np.asarray(a, dtype=float)
        minors = self.M0.copy()
        for pos in range(3):
            minors -= a[self.combos[:, pos]] * self.Ms[pos]
        margin = np.abs(minors).sum(axis=1)
        vol = np.sqrt((minors ** 2).sum(axis=1))
        frob2 = (self.sq - 2 * a * self.cross + np.outer(self.pp, a * a)).sum(axis=1)
        certified = vol > self.rtol * frob2 ** 1.5
        return margin, certified

    def check(self, a: np.ndarray, min_margin: float = 0.0) -> tuple[bool, float, bool]:
        margin, certified = self.screen(a)
        if np.all(certified):
            m = float(margin.min())
            if m > min_margin and self.J.shape[1] - 1 >= D + 1:
                return True, m, True
        return try_reduction(self.J, a, min_margin)


def try_reduction(J: np.ndarray, a: np.ndarray, min_margin: float = 0.0) -> tuple[bool, float, bool]:
    """(admissible, margin, rank sandwich holds) for one coefficient vector.

    With ``min_margin`` > 0 the reduced margin must also reach that value
    (for large families the Gram lower bound stands in for the minor sum).
    """
    Jr = reduce_matrices(J, a)
    rk = ranks(Jr)
    sandwich = bool(np.all((rk >= D) & (rk <= D + 1)))
    m = np.where(rk == D + 1, fast_margin(Jr), 0.0)
    ok = Jr.shape[1] >= D + 1 and bool(np.all(rk == D + 1)) and m.min() > min_margin
    return ok, float(m.min()), sandwich


def reduce_once(J: np.ndarray, rng: np.random.Generator, retry_cap: int = 20,
                a: np.ndarray | None = None, min_margin: float = 0.0) -> ReductionStep:
    """One P -> P-1 step on sample Jacobians; draws a ~ U[-1,1]^{P-1} until admissible."""
    P = J.shape[-2]
    if P - 1 < D + 1:
        raise ReductionError(f"cannot reduce a family of {P} below {D + 1}")
    rejected = []
    sandwich_all = True
    test = ReductionScreen(J).check if P <= ReductionScreen.MAX_P else partial(try_reduction, J)
    for attempt in range(1, retry_cap + 1):
        cand = np.asarray(a, dtype=float) if (a is not None and attempt == 1) else rng.uniform(-1, 1, P - 1)
        ok, m, sandwich = test(cand, min_margin)
        sandwich_all &= sandwich
        if ok:
            return ReductionStep(cand, m, attempt, rejected, sandwich_all)
        rejected.append(cand)
    raise ReductionError(f"retry cap {retry_cap} exhausted; {len(rejected)} draws rejected")


def apply_reduction(us, a) -> list[SolutionField]:
    us = _fields(us)
    last = us[-1]
    return [SolutionField(u.mesh, u.elem_values - ai * last.elem_values, u.op,
                          f"({u.trace}) - {ai:.6g}*({last.trace})") for u, ai in zip(us[:-1], a)]


@dataclass
class WhitneyResult:
    fields: list[SolutionField]
    steps: list[ReductionStep]

    @property
    def coefficients(self) -> list[list[float]]:
        return [s.a.tolist() for s in self.steps]

    @property
    def margins(self) -> list[float]:
        return [s.margin for s in self.steps]


def whitney_reduce(us, seed: int | np.random.Generator = 0, retry_cap: int = 20, target: int | None = None,
                   probe: FamilyProbe | None = None, a: np.ndarray | None = None) -> WhitneyResult:
    """Reduce a family by v_i = u_i - a_i u_P, repeatedly down to ``target`` members (default P-1).

    Each candidate a is certified on the probe's samples before acceptance.
    """
    us = _fields(us)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    probe = probe or FamilyProbe.standard(us[0].mesh)
    target = len(us) - 1 if target is None else target
    J = probe.jacobians(us)
    steps = []
    while J.shape[1] > target:
        step = reduce_once(J, rng, retry_cap, a if not steps else None)
        steps.append(step)
        J = reduce_matrices(J, step.a)
        us = apply_reduction(us, step.a)
    return WhitneyResult(us, steps)


def failure_rate(J: np.ndarray, n_draws: int, seed: int = 0) -> tuple[float, bool]:
    """Fraction of uniform draws whose one-step reduction is not admissible, and whether the sandwich held."""
    rng = np.random.default_rng(seed)
    fails, sandwich = 0, True
    P = J.shape[-2]
    test = ReductionScreen(J).check if P <= ReductionScreen.MAX_P else partial(try_reduction, J)
    for _ in range(n_draws):
        ok, _, sw = test(rng.uniform(-1, 1, P - 1))
        fails += not ok
        sandwich &= sw
    return fails / n_draws, sandwich
