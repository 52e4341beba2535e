"""Shared scenes, coefficient sets and cached meshes."""
from __future__ import annotations

import functools

import numpy as np
import pytest

from jaclab.coefficients import CoefficientSet
from jaclab.geometry import Circle, Outer, Scene
from jaclab.solver.mesh import build_mesh

GAMMA_IN, GAMMA_OUT, RADIUS = 2.0, 1.0, 0.5


def unit_disk(circles=()) -> Scene:
    return Scene(Outer("disk", center=(0.0, 0.0), radius=1.0), list(circles))


def two_phase_scene() -> Scene:
    return unit_disk([Circle((0.0, 0.0), RADIUS)])


def five_region_scene() -> Scene:
    """Background 5 holding circle 1 (which holds 2, which holds 3) and circle 4."""
    return unit_disk([Circle((0.35, 0.0), 0.5), Circle((0.35, 0.0), 0.3), Circle((0.35, 0.0), 0.1),
                      Circle((-0.6, 0.0), 0.2)])


def two_phase_coeffs(lam: float = 0.4) -> CoefficientSet:
    return CoefficientSet.conductivity({1: GAMMA_IN, 2: GAMMA_OUT}, lam)


def two_phase_exact(pts: np.ndarray, region) -> np.ndarray:
    """Transmission solution for g = x1: A r cos(t) inside, (B r + C / r) cos(t) outside."""
    C = -1.0 / 11.0
    B = 12.0 / 11.0
    A = B + C / RADIUS ** 2
    x, y = pts[:, 0], pts[:, 1]
    r2 = x * x + y * y
    inside = np.broadcast_to(np.asarray(region) == 1, x.shape)
    return np.where(inside, A * x, B * x + C * x / np.where(r2 > 0, r2, 1.0))


@functools.lru_cache(maxsize=None)
def cached_mesh(kind: str, h: float):
    scene = {"disk": unit_disk, "two_phase": two_phase_scene, "five": five_region_scene}[kind]()
    return build_mesh(scene, h)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
