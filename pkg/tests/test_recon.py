import math

import numpy as np
import pytest

from jaclab.recon import (Phantom, evaluate_against, flux_log_defect, internal_data, reconstruct,
                          recover_jumps, recover_log_gradient)
from jaclab.solver.evaluate import Sampler

from conftest import GAMMA_IN, GAMMA_OUT, cached_mesh, two_phase_scene

ANCHOR = (0.8, 0.0)
H = 1 / 32


def _data(gammas, h=H, kind="two_phase"):
    scene = two_phase_scene()
    phantom = Phantom(scene, gammas, ANCHOR, 1.0)
    return phantom, internal_data(phantom, cached_mesh(kind, h))


@pytest.fixture(scope="module")
def two_phase_data():
    return _data({1: GAMMA_IN, 2: GAMMA_OUT})


def test_equal_phases_give_zero_jump():
    phantom, us = _data({1: 1.5, 2: 1.5})
    est = recover_jumps(us, phantom.scene.interface(1, 2))
    assert abs(est.value) <= 3 * est.dispersion + 1e-3


def test_jump_matches_log_ratio(two_phase_data):
    phantom, us = two_phase_data
    est = recover_jumps(us, phantom.scene.interface(1, 2))
    assert est.value == pytest.approx(math.log(GAMMA_OUT / GAMMA_IN), abs=0.1)


def test_jump_antisymmetry(two_phase_data):
    phantom, us = two_phase_data
    itf = phantom.scene.interface(1, 2)
    a = recover_jumps(us, itf)
    b = recover_jumps(us, itf.flipped())
    assert abs(a.value + b.value) <= 1e-10
    assert np.allclose(a.samples, -b.samples, equal_nan=True, atol=1e-10)


def test_smooth_log_gradient_recovered():
    phantom, us = _data({1: "exp(x)", 2: "exp(x)"}, h=1 / 64)
    pts = phantom.scene.grid(0.1, tube_halfwidth=0.1, margin=0.1)
    regions = phantom.scene.region_of(pts)
    for r in (1, 2):
        gf = recover_log_gradient(us, r, pts[regions == r])
        assert not gf.flagged.any()
        med = np.median(gf.g, axis=0)
        assert abs(med[0] - 1.0) <= 0.05
        assert abs(med[1]) <= 0.05


def test_five_traces_give_rank_two_stacks(two_phase_data):
    phantom, us = two_phase_data
    assert len(us) == 5
    pts = phantom.scene.grid(0.1, tube_halfwidth=0.1, margin=0.1)
    regions = phantom.scene.region_of(pts)
    gf = recover_log_gradient(us, 2, pts[regions == 2])
    assert np.all(gf.rank == 2)


def test_sign_convention_residual():
    # with the true log-gradient (1, 0) the rows Du . g = -Laplacian(u) nearly balance, the opposite sign does not
    phantom, us = _data({1: "exp(x)", 2: "exp(x)"}, h=1 / 64)
    pts = phantom.scene.grid(0.1, tube_halfwidth=0.1, margin=0.1)
    regions = phantom.scene.region_of(pts)
    s = Sampler.build(us[0].mesh, pts[regions == 2], 2, laplacian=True)
    G = s.gradients(us)
    lap = s.laplacians(us)
    g = np.array([1.0, 0.0])
    right = np.median(np.abs(G @ g + lap))
    wrong = np.median(np.abs(G @ g - lap))
    assert right < 0.2 * wrong


def test_anchor_value_scales_output(two_phase_data):
    phantom, us = two_phase_data
    r1 = reconstruct(us, phantom.scene, ANCHOR, 1.0)
    r2 = reconstruct(us, phantom.scene, ANCHOR, 2.0)
    pts = phantom.scene.grid(0.1, tube_halfwidth=0.1, margin=0.1)
    regions = phantom.scene.region_of(pts)
    assert np.allclose(r2.gamma(pts, regions), 2 * r1.gamma(pts, regions), rtol=1e-12)
    a = np.array([ANCHOR])
    assert r1.gamma(a, phantom.scene.region_of(a))[0] == pytest.approx(1.0, abs=1e-12)


def test_raw_output_invariant_under_conductivity_scaling(two_phase_data):
    phantom, us = two_phase_data
    scaled = phantom.scaled(3.0)
    us3 = internal_data(scaled, us[0].mesh)
    pts = phantom.scene.grid(0.1, tube_halfwidth=0.1, margin=0.1)
    regions = phantom.scene.region_of(pts)
    raw1 = reconstruct(us, phantom.scene, ANCHOR).log_gamma_raw(pts, regions)
    raw3 = reconstruct(us3, phantom.scene, ANCHOR).log_gamma_raw(pts, regions)
    assert np.allclose(raw1, raw3, atol=1e-8)


def test_reconstruction_error_coarse(two_phase_data):
    phantom, us = two_phase_data
    res = reconstruct(us, phantom.scene, ANCHOR)
    errs = evaluate_against(res, phantom)
    assert errs["gamma_rel_l2"] < 0.1
    assert abs(errs["jump_1|2_error"]) < 0.1


def test_flux_log_defect_shrinks_with_h():
    vals = []
    for h in (1 / 16, 1 / 32, 1 / 64):
        phantom, us = _data({1: GAMMA_IN, 2: GAMMA_OUT}, h=h)
        g_in = lambda p: np.full(len(p), GAMMA_IN)
        g_out = lambda p: np.full(len(p), GAMMA_OUT)
        vals.append(flux_log_defect(us, phantom.scene.interface(1, 2), g_in, g_out))
    assert vals[2] < vals[1] < vals[0]
    assert vals[2] < 0.6 * vals[0] / 2
