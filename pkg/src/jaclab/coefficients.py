"""Piecewise coefficients (A_i, b_i, c_i, q_i), coefficient swaps and the well-posedness shift.

The operator is ``L u = -div(A Du + b u) + c . Du + q u`` with every
coefficient defined region by region.  Coefficients are constants or
closed-form smooth functions of position (numpy expressions in x, y).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geometry import Scene

_SAFE = {name: getattr(np, name) for name in (
    "exp", "log", "sin", "cos", "tan", "sinh", "cosh", "tanh", "sqrt", "abs", "arctan2", "pi")}


def expression(src: str) -> Callable[[np.ndarray], np.ndarray]:
    """Compile a numpy expression in ``x`` and ``y`` into a function of points."""
    code = compile(src, "<coefficient>", "eval")
    for name in code.co_names:
        if name not in _SAFE and name not in ("x", "y"):
            raise ValueError(f"unknown name {name!r} in expression {src!r}")

    def fn(pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        val = eval(code, {"__builtins__": {}}, {**_SAFE, "x": pts[:, 0], "y": pts[:, 1]})
        return np.broadcast_to(np.asarray(val, dtype=float), (len(pts),)).copy()

    fn.source = src  # type: ignore[attr-defined]
    return fn


@dataclass(frozen=True)
class RegionCoefficients:
    """Coefficients of one region.  Each entry is a constant or a callable of points.

    ``A`` may be a 2x2 array, a scalar (meaning scalar * I) or a callable
    returning either ``(n,)`` (isotropic) or ``(n, 2, 2)``.
    """

    A: object = 1.0
    b: object = (0.0, 0.0)
    c: object = (0.0, 0.0)
    q: object = 0.0

    def eval_A(self, pts: np.ndarray) -> np.ndarray:
        n = len(pts)
        A = self.A(pts) if callable(self.A) else np.asarray(self.A, dtype=float)
        A = np.asarray(A, dtype=float)
        if A.ndim == 0:
            return A * np.broadcast_to(np.eye(2), (n, 2, 2)).copy()
        if A.shape == (2, 2):
            return np.broadcast_to(A, (n, 2, 2)).copy()
        if A.shape == (n,):
            return A[:, None, None] * np.eye(2)
        return A.reshape(n, 2, 2)

    def _vec(self, v, pts):
        n = len(pts)
        if callable(v):
            return np.asarray(v(pts), dtype=float).reshape(n, 2)
        return np.broadcast_to(np.asarray(v, dtype=float), (n, 2)).copy()

    def eval_b(self, pts):
        return self._vec(self.b, pts)

    def eval_c(self, pts):
        return self._vec(self.c, pts)

    def eval_q(self, pts):
        n = len(pts)
        if callable(self.q):
            return np.asarray(self.q(pts), dtype=float).reshape(n)
        return np.full(n, float(self.q))

    @property
    def is_constant(self) -> bool:
        return not any(callable(v) for v in (self.A, self.b, self.c, self.q))


@dataclass(frozen=True)
class CoefficientSet:
    regions: dict[int, RegionCoefficients]
    lam: float = 1.0
    alpha: float = 1.0

    @classmethod
    def from_dict(cls, data: dict, n_regions: int | None = None) -> "CoefficientSet":
        if "lambda" not in data:
            raise KeyError("lambda")
        regions = {}
        for key, entry in data.get("regions", {}).items():
            regions[int(key)] = _region_from_dict(entry)
        if n_regions is not None:
            missing = [r for r in range(1, n_regions + 1) if r not in regions]
            if missing:
                raise KeyError(f"regions {missing}")
        return cls(regions, float(data["lambda"]), float(data.get("alpha", 1.0)))

    @classmethod
    def laplace(cls, n_regions: int, lam: float = 1.0) -> "CoefficientSet":
        return cls({r: RegionCoefficients() for r in range(1, n_regions + 1)}, lam, 1.0)

    @classmethod
    def conductivity(cls, gammas: dict[int, object], lam: float | None = None) -> "CoefficientSet":
        """A = gamma_i I, b = c = q = 0 (constants or callables)."""
        regions = {r: RegionCoefficients(A=g) for r, g in gammas.items()}
        if lam is None:
            consts = [float(g) for g in gammas.values() if not callable(g)]
            lam = 0.5 * min(consts + [1.0])
        return cls(regions, lam, 1.0)

    def scaled(self, factor: float) -> "CoefficientSet":
        """Every A_i multiplied by ``factor`` (b, c, q untouched)."""
        out = {}
        for r, rc in self.regions.items():
            A = rc.A
            newA = (lambda pts, A=A: factor * np.asarray(A(pts))) if callable(A) else factor * np.asarray(A, dtype=float)
            out[r] = RegionCoefficients(newA, rc.b, rc.c, rc.q)
        return CoefficientSet(out, self.lam * min(factor, 1.0), self.alpha)

    @property
    def n_regions(self) -> int:
        return len(self.regions)


def _region_from_dict(entry: dict) -> RegionCoefficients:
    def conv(v):
        if isinstance(v, str):
            return expression(v)
        if isinstance(v, list) and any(isinstance(e, str) for e in v):
            parts = [expression(e) if isinstance(e, str) else float(e) for e in v]
            return lambda pts: np.stack([p(pts) if callable(p) else np.full(len(pts), p) for p in parts], axis=1)
        return v

    if "A_scalar" in entry:
        A = conv(entry["A_scalar"])
        if not callable(A):
            A = float(A)
    else:
        A = np.asarray(entry.get("A", [[1.0, 0.0], [0.0, 1.0]]), dtype=float)
    return RegionCoefficients(A=A, b=conv(entry.get("b", [0.0, 0.0])),
                              c=conv(entry.get("c", [0.0, 0.0])), q=conv(entry.get("q", 0.0)))


@dataclass(frozen=True)
class OperatorSpec:
    """L[i_1..i_{N+1}] + kappa: region j uses the coefficients of region assignment[j-1]."""

    coeffs: CoefficientSet
    assignment: tuple[int, ...]
    kappa: float = 0.0

    def source_region(self, region: int) -> RegionCoefficients:
        return self.coeffs.regions[self.assignment[region - 1]]

    def at(self, pts: np.ndarray, region: int):
        """(A, b, c, q) at points of one region, with the shift folded into q."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        rc = self.source_region(region)
        return rc.eval_A(pts), rc.eval_b(pts), rc.eval_c(pts), rc.eval_q(pts) + self.kappa

    def with_kappa(self, kappa: float) -> "OperatorSpec":
        return OperatorSpec(self.coeffs, self.assignment, kappa)

    @property
    def is_symmetric(self) -> bool:
        """b == c everywhere (checked for constant coefficients only)."""
        for r in set(self.assignment):
            rc = self.coeffs.regions[r]
            if callable(rc.b) or callable(rc.c):
                return False
            if not np.allclose(np.asarray(rc.b, float), np.asarray(rc.c, float)):
                return False
        return True


def make_operator(coeffs: CoefficientSet, assignment: Sequence[int] | None = None,
                  kappa: float = 0.0) -> OperatorSpec:
    n = coeffs.n_regions
    if assignment is None:
        assignment = tuple(range(1, n + 1))
    assignment = tuple(int(a) for a in assignment)
    if len(assignment) != n:
        raise ValueError(f"assignment has length {len(assignment)}, expected {n}")
    bad = [a for a in assignment if not 1 <= a <= n]
    if bad:
        raise ValueError(f"invalid assignment entries {bad}")
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    return OperatorSpec(coeffs, assignment, float(kappa))


# ---------------------------------------------------------------------------
# audits
# ---------------------------------------------------------------------------

@dataclass
class CoefficientAudit:
    min_ellipticity: float
    max_sup_norm: float
    max_holder_quotient: float
    max_asymmetry: float
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def audit_coefficients(coeffs: CoefficientSet, scene: Scene, spacing: float = 0.05,
                       n_directions: int = 16) -> CoefficientAudit:
    """Sampled check of ellipticity, symmetry, sup norms and in-region Hölder quotients."""
    pts = scene.grid(spacing)
    regions = scene.region_of(pts)
    th = np.linspace(0, np.pi, n_directions, endpoint=False)
    zeta = np.c_[np.cos(th), np.sin(th)]
    lam, alpha = coeffs.lam, coeffs.alpha
    min_ell, max_sup, max_hold, max_asym = math.inf, 0.0, 0.0, 0.0
    for r in scene.region_ids:
        p = pts[regions == r]
        if len(p) == 0:
            continue
        rc = coeffs.regions[r]
        A, b, c, q = rc.eval_A(p), rc.eval_b(p), rc.eval_c(p), rc.eval_q(p)
        quad = np.einsum("ki,nij,kj->nk", zeta, A, zeta)
        min_ell = min(min_ell, float(quad.min()))
        max_asym = max(max_asym, float(np.abs(A - A.transpose(0, 2, 1)).max()))
        flat = np.c_[A.reshape(len(p), 4), b, c, q]
        max_sup = max(max_sup, float(np.abs(flat).max()))
        # Hölder quotients between nearby pairs inside the region
        if len(p) > 1:
            rng = np.random.default_rng(0)
            idx = rng.integers(0, len(p), size=(min(4000, len(p) * 4), 2))
            idx = idx[idx[:, 0] != idx[:, 1]]
            dist = np.linalg.norm(p[idx[:, 0]] - p[idx[:, 1]], axis=1)
            diff = np.abs(flat[idx[:, 0]] - flat[idx[:, 1]]).max(axis=1)
            max_hold = max(max_hold, float((diff / dist ** alpha).max(initial=0.0)))
    viol = []
    if not min_ell > lam:
        viol.append(f"ellipticity: min A zeta.zeta = {min_ell:.4g} <= lambda = {lam}")
    if max_asym > 1e-12:
        viol.append(f"A not symmetric (max asymmetry {max_asym:.3g})")
    if max_sup > 1.0 / lam:
        viol.append(f"sup norm {max_sup:.4g} exceeds 1/lambda = {1 / lam:.4g}")
    if max_hold > 1.0 / lam:
        viol.append(f"Hölder quotient {max_hold:.4g} exceeds 1/lambda = {1 / lam:.4g}")
    return CoefficientAudit(min_ell, max_sup, max_hold, max_asym, viol)


# ---------------------------------------------------------------------------
# well-posedness shift
# ---------------------------------------------------------------------------

def coercivity_constant(lam: float) -> float:
    """M = 1/lambda + 1/lambda^3 + 1."""
    return 1.0 / lam + 1.0 / lam ** 3 + 1.0


def shift_bound(aleph: float, M: float) -> float:
    """theta = aleph M^2 / (1 + aleph M)."""
    return aleph * M * M / (1.0 + aleph * M)


@dataclass
class ShiftReport:
    M: float
    aleph: float
    theta: float
    kappa: float
    assignments: list[tuple[int, ...]]
    min_relative_singular_value: float
    probes_passed: bool
    bisections: int = 0

    def to_dict(self) -> dict:
        return {"M": self.M, "aleph": self.aleph, "theta": self.theta, "kappa": self.kappa,
                "assignments": [list(a) for a in self.assignments],
                "min_relative_singular_value": self.min_relative_singular_value,
                "probes_passed": self.probes_passed, "bisections": self.bisections}


def coercivity_shift(coeffs: CoefficientSet, scene: Scene, mesh, assignments=None,
                     probe_tol: float = 1e-10, max_bisections: int = 30,
                     n_eigs: int = 6) -> ShiftReport:
    """Choose one shift kappa in (0, theta) making every probed swap operator invertible.

    ``assignments`` defaults to the index maps of the smallest-id
    construction map started at the background.  aleph is half the
    smallest distance from 1/M to the discrete spectrum of (L_i + M)^{-1}.
    """
    from .geometry import construction_map, index_maps
    from .solver.fem import assemble, dirichlet_partition, smallest_relative_singular_value, \
        generalized_eigs_near_zero

    if assignments is None:
        cm = construction_map(scene, scene.background_id)
        assignments = [tuple(a) for a in index_maps(cm)]
    assignments = [tuple(a) for a in dict.fromkeys(tuple(a) for a in assignments)]
    M = coercivity_constant(coeffs.lam)
    dists = []
    interior = dirichlet_partition(mesh)[0]
    for asg in assignments:
        op = make_operator(coeffs, asg, 0.0)
        K, Mass = assemble(op, mesh, with_mass=True)
        K_ii = K[interior][:, interior]
        M_ii = Mass[interior][:, interior]
        mu = generalized_eigs_near_zero(K_ii, M_ii, k=n_eigs)
        res = 1.0 / (mu + M)
        dists.append(float(np.min(np.abs(1.0 / M - res))))
    aleph = 0.5 * min(dists)
    theta = shift_bound(aleph, M)
    kappa = 0.5 * theta
    bis = 0
    while True:
        worst = math.inf
        for asg in assignments:
            op = make_operator(coeffs, asg, kappa)
            K = assemble(op, mesh)
            worst = min(worst, smallest_relative_singular_value(K[interior][:, interior]))
        if worst > probe_tol or bis >= max_bisections:
            break
        kappa *= 0.5
        bis += 1
    return ShiftReport(M, aleph, theta, kappa, assignments, worst, worst > probe_tol, bis)
