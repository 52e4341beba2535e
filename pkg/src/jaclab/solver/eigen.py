"""Annulus eigenvalues and the thin-annulus coercivity probe."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import trapezoid
from scipy.linalg import solve_banded

from ..coefficients import OperatorSpec
from .fem import coercivity_ratio
from .mesh import build_annulus_mesh


class ConvergenceError(RuntimeError):
    pass


def _radial_fd(t: float, s: float, n: int):
    """Symmetric tridiagonal form of -(r f')' = rho r f on (t, s), f(t) = f(s) = 0.

    Returns banded storage of D^{-1/2} K D^{-1/2} with D = diag(r_i), plus
    the interior grid.
    """
    dx = (s - t) / (n + 1)
    r = t + dx * np.arange(1, n + 1)
    r_half = t + dx * (np.arange(n + 1) + 0.5)
    diag = (r_half[:-1] + r_half[1:]) / dx ** 2 / r
    off = -r_half[1:-1] / dx ** 2 / np.sqrt(r[:-1] * r[1:])
    ab = np.zeros((3, n))
    ab[0, 1:] = off
    ab[1] = diag
    ab[2, :-1] = off
    return ab, r


def _smallest_eig_inverse_iteration(ab: np.ndarray, tol: float = 1e-13, maxit: int = 500) -> float:
    n = ab.shape[1]
    v = np.sin(np.pi * (np.arange(1, n + 1)) / (n + 1))
    v /= np.linalg.norm(v)
    rho_old = math.inf
    for _ in range(maxit):
        w = solve_banded((1, 1), ab, v)
        v = w / np.linalg.norm(w)
        Av = ab[1] * v
        Av[:-1] += ab[0, 1:] * v[1:]
        Av[1:] += ab[2, :-1] * v[:-1]
        rho = float(v @ Av)
        if abs(rho - rho_old) <= tol * abs(rho):
            return rho
        rho_old = rho
    raise ConvergenceError("inverse iteration did not converge")


def annulus_eigenvalue(t: float, s: float, tol: float = 1e-8, n0: int = 200, max_doublings: int = 12) -> float:
    """Smallest Dirichlet eigenvalue of the Laplacian on the annulus t < |x| < s (radial mode).

    Second-order finite differences with grid doubling and Richardson
    extrapolation until successive extrapolated values agree to ``tol``.
    """
    if not 0 < t < s:
        raise ValueError("need 0 < t < s")
    prev_raw = _smallest_eig_inverse_iteration(_radial_fd(t, s, n0)[0])
    prev_ext = None
    n = n0
    for _ in range(max_doublings):
        n = 2 * n + 1        # keeps old nodes, halves dx
        raw = _smallest_eig_inverse_iteration(_radial_fd(t, s, n)[0])
        ext = (4.0 * raw - prev_raw) / 3.0
        if prev_ext is not None and abs(ext - prev_ext) <= tol * abs(ext):
            return ext
        prev_raw, prev_ext = raw, ext
    raise ConvergenceError(f"annulus eigenvalue not converged to {tol}")


def poincare_check(t: float, s: float, n_funcs: int = 10, seed: int = 0, n: int = 4000) -> list[tuple[float, float]]:
    """(||u||^2, ||u'||^2 / rho) pairs for random radial test functions vanishing at t and s.

    Each pair should satisfy first <= second.  Integrals carry the r weight.
    """
    rho = annulus_eigenvalue(t, s)
    rng = np.random.default_rng(seed)
    r = np.linspace(t, s, n)
    x = (r - t) / (s - t)
    out = []
    for _ in range(n_funcs):
        k = np.arange(1, 7)
        a = rng.normal(size=6) / k
        u = np.sin(np.pi * np.outer(x, k)) @ a
        du = (np.pi / (s - t)) * (np.cos(np.pi * np.outer(x, k)) * k) @ a
        out.append((float(trapezoid(u * u * r, r)), float(trapezoid(du * du * r, r) / rho)))
    return out


@dataclass
class CoercivityProbe:
    width: float
    ratio: float
    bound: float

    @property
    def ok(self) -> bool:
        return self.ratio >= self.bound


def annulus_coercivity(op: OperatorSpec, center, radius: float, width: float, h: float | None = None,
                       scene=None) -> float:
    """min <L u, u> / ||Du||^2 over H^1_0 of the annulus of ``width`` centred on a circle."""
    h = h if h is not None else width / 6.0
    resolved = radius if scene is not None else None
    mesh = build_annulus_mesh(center, radius - width / 2, radius + width / 2, h, interface=resolved, scene=scene)
    return coercivity_ratio(op, mesh)


def find_eta0(op: OperatorSpec, center, radius: float, lam: float, w_max: float = 0.2,
              w_min: float = 1e-3, scene=None, iters: int = 12) -> float:
    """Largest width in [w_min, w_max] (by bisection) at which the ratio is still >= lam / 3."""
    bound = lam / 3.0

    def ok(w):
        return annulus_coercivity(op, center, radius, w, scene=scene) >= bound

    if ok(w_max):
        return w_max
    if not ok(w_min):
        raise ConvergenceError("coercivity bound fails even on the thinnest probed annulus")
    lo, hi = w_min, w_max
    for _ in range(iters):
        mid = math.sqrt(lo * hi)
        lo, hi = (mid, hi) if ok(mid) else (lo, mid)
    return lo
