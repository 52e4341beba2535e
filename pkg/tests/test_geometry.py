from itertools import permutations

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from jaclab.geometry import (Circle, Outer, Scene, all_construction_maps, check_index_maps, construction_map,
                             index_maps, is_construction_map, validate_scene)

from conftest import five_region_scene, unit_disk


def test_nested_pair_is_valid():
    scene = unit_disk([Circle((0, 0), 0.5), Circle((0, 0), 0.2)])
    rep = validate_scene(scene)
    assert rep.ok
    assert scene.N == 2 and scene.background_id == 3
    assert scene.parent == {1: 3, 2: 1}


def test_intersecting_circles_rejected():
    rep = validate_scene(unit_disk([Circle((0.4, 0), 0.5), Circle((-0.4, 0), 0.5)]))
    assert not rep.ok
    assert any("interfaces intersect" in v for v in rep.violations)


def test_circle_touching_outer_boundary_rejected():
    rep = validate_scene(unit_disk([Circle((0.5, 0), 0.5)]))
    assert any("d(∪Ω_i, ℝ²∖Ω) = 0" in v for v in rep.violations)


def test_tangent_circles_rejected():
    rep = validate_scene(unit_disk([Circle((0.3, 0), 0.3), Circle((-0.3, 0), 0.3)]))
    assert any("tangent" in v for v in rep.violations)


def _adjacency_oracle(scene: Scene) -> dict[int, set[int]]:
    """Region adjacency from the nesting relation alone: circle k touches itself and its parent."""
    adj = {r: set() for r in scene.region_ids}
    for k in range(1, scene.N + 1):
        inside = [m for m in range(1, scene.N + 1) if m != k
                  and np.hypot(*np.subtract(scene.circles[k - 1].center, scene.circles[m - 1].center))
                  + scene.circles[k - 1].radius < scene.circles[m - 1].radius]
        parent = min(inside, key=lambda m: scene.circles[m - 1].radius) if inside else scene.background_id
        adj[k].add(parent)
        adj[parent].add(k)
    return adj


def _brute_force_maps(scene: Scene, start: int) -> list[tuple[int, ...]]:
    adj = _adjacency_oracle(scene)
    out = []
    others = [r for r in scene.region_ids if r != start]
    for p in permutations(others):
        order = (start, *p)
        if all(sum(1 for q in order[:j] if q in adj[order[j]]) == 1 for j in range(1, len(order))):
            out.append(order)
    return sorted(out)


def test_five_region_example_map_is_accepted():
    scene = five_region_scene()
    assert validate_scene(scene).ok
    assert is_construction_map(scene, (2, 3, 1, 5, 4))
    cm = construction_map(scene, 2, order=(2, 3, 1, 5, 4))
    assert cm.order == (2, 3, 1, 5, 4)


def test_five_region_example_index_maps():
    cm = construction_map(five_region_scene(), 2, order=(2, 3, 1, 5, 4))
    maps = index_maps(cm)
    assert maps == [[2, 2, 2, 2, 2], [2, 2, 3, 2, 2], [1, 2, 3, 1, 1], [1, 2, 3, 5, 5], [1, 2, 3, 4, 5]]
    assert check_index_maps(cm, maps)


def test_five_region_default_map_uses_smallest_id():
    scene = five_region_scene()
    cm = construction_map(scene, 2)
    assert cm.order == (2, 1, 3, 5, 4)
    assert cm.order in _brute_force_maps(scene, 2)


def test_chain_has_unique_map():
    # region 2 inside region 1 inside the background 3
    scene = unit_disk([Circle((0, 0), 0.6), Circle((0, 0), 0.3)])
    maps = _brute_force_maps(scene, 2)
    assert maps == [(2, 1, 3)]
    assert all_construction_maps(scene, 2) == maps
    assert construction_map(scene, 2).order == (2, 1, 3)


def test_two_siblings_have_two_maps():
    scene = unit_disk([Circle((0.5, 0), 0.3), Circle((-0.5, 0), 0.3)])
    maps = _brute_force_maps(scene, 3)
    assert maps == [(3, 1, 2), (3, 2, 1)]
    assert all_construction_maps(scene, 3) == maps
    assert construction_map(scene, 3).order == (3, 1, 2)


def test_no_inclusions_single_index_map():
    cm = construction_map(unit_disk(), 1)
    assert index_maps(cm) == [[1]]


def test_invalid_order_raises():
    with pytest.raises(ValueError):
        construction_map(five_region_scene(), 2, order=(2, 5, 1, 3, 4))


def _random_scene(seed: int) -> Scene:
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 5))
    circles = []
    for _ in range(n):
        c = rng.uniform(-0.6, 0.6, 2)
        circles.append(Circle(tuple(c), float(rng.uniform(0.05, 0.35))))
    return unit_disk(circles)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_random_scenes_maps_and_index_maps(seed):
    scene = _random_scene(seed)
    assume(validate_scene(scene).ok)
    oracle = None
    for start in scene.region_ids:
        cm = construction_map(scene, start)
        if scene.N <= 4:
            oracle = _brute_force_maps(scene, start)
            assert cm.order == oracle[0]
        maps = index_maps(cm)
        assert check_index_maps(cm, maps)
        assert maps[0] == [start] * (scene.N + 1)
        assert maps[-1] == list(range(1, scene.N + 2))
        # each intermediate operator only uses coefficients of regions already placed
        for s, m in enumerate(maps, start=1):
            assert set(m) <= set(cm.order[:s])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_interface_normal_antisymmetry(seed):
    scene = _random_scene(seed)
    assume(validate_scene(scene).ok)
    rng = np.random.default_rng(seed)
    for itf in scene.interfaces():
        x = itf.points(17, float(rng.uniform(0, 1)))
        back = scene.interface(itf.j, itf.i)
        assert np.array_equal(back.normal(x), -itf.normal(x))
        assert np.allclose(np.linalg.norm(itf.normal(x), axis=1), 1.0)


def test_grid_excludes_tubes_and_excluded_area_shrinks():
    scene = unit_disk([Circle((0, 0), 0.5)])
    spacing = 0.01
    full = len(scene.grid(spacing))
    lost = []
    for tube in (0.08, 0.04, 0.02):
        pts = scene.grid(spacing, tube_halfwidth=tube)
        assert np.all(scene.interface_distance(pts) > tube)
        lost.append(full - len(pts))
    assert lost[0] > lost[1] > lost[2] > 0
    # excluded area ~ 2 * tube * perimeter
    assert lost[2] * spacing ** 2 == pytest.approx(2 * 0.02 * 2 * np.pi * 0.5, rel=0.1)


def test_scene_json_round_trip():
    scene = five_region_scene()
    again = Scene.from_dict(scene.to_dict())
    assert again.to_dict() == scene.to_dict()
    assert again.parent == scene.parent


def test_rect_outer_domain():
    scene = Scene(Outer("rect", lower=(-1, -1), upper=(1, 1)), [Circle((0, 0), 0.5)])
    assert validate_scene(scene).ok
    assert scene.region_of(np.array([[0.9, 0.9], [0.0, 0.0], [1.5, 0]])).tolist() == [2, 1, 0]
