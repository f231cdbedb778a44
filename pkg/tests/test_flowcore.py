import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from arflow import flowcore as fc
from arflow.tensor import ContractError, Graph, Tensor, backward


def test_zero_flow_warp_is_identity(rng):
    img = rng.uniform(size=(6, 7, 3))
    warped, oob = fc.warp(img, np.zeros((6, 7, 2)))
    assert warped.tobytes() == img.tobytes()
    assert not oob.any()


def test_constant_shift_on_ramp():
    xs = np.arange(8, dtype=np.float64)
    img = np.tile(xs[None, :, None], (5, 1, 1))
    flow = np.zeros((5, 8, 2))
    flow[..., 0] = 1.0
    warped, oob = fc.warp(img, flow)
    np.testing.assert_allclose(warped[:, :-1, 0], img[:, 1:, 0], atol=1e-12)
    assert oob[:, -1].all() and not oob[:, :-1].any()


def test_warp_matches_brute_force(rng):
    img = rng.uniform(size=(4, 4, 2))
    flow = rng.uniform(-2, 2, (4, 4, 2))
    warped, oob = fc.warp(img, flow)
    ref, ref_oob = oracles.warp(img, flow)
    np.testing.assert_allclose(warped, ref, atol=1e-12)
    np.testing.assert_array_equal(oob, ref_oob)


def test_warp_extent_mismatch():
    with pytest.raises(ContractError):
        fc.warp(np.zeros((4, 4, 1)), np.zeros((4, 5, 2)))


def test_warp_differentiable_in_both_inputs(rng):
    img = Tensor(rng.uniform(size=(1, 5, 5, 1)), requires_grad=True)
    flow = Tensor(rng.uniform(-0.7, 0.7, (1, 5, 5, 2)) + 0.3, requires_grad=True)
    with Graph() as g:
        w, _ = fc.warp(img, flow)
        loss = (w * w).sum()
    grads = backward(g, loss)
    assert np.abs(grads[img.id]).sum() > 0 and np.abs(grads[flow.id]).sum() > 0


def test_fb_consistent_constant_flows():
    fwd = np.zeros((6, 6, 2))
    fwd[..., 0] = 1.0
    occ = fc.occlusion_forward_backward(fwd, -fwd)
    # only the last column leaves the image; every in-bounds pixel is consistent
    assert occ[:, -1].all() and not occ[:, :-1].any()


def test_fb_out_of_bounds_everywhere():
    fwd = np.full((5, 5, 2), 10.0)
    assert fc.occlusion_forward_backward(fwd, -fwd).all()


def test_fb_single_inconsistent_pixel():
    fwd = np.zeros((5, 5, 2))
    bwd = np.zeros((5, 5, 2))
    fwd[2, 1] = (2.0, 0.0)
    occ = fc.occlusion_forward_backward(fwd, bwd)
    np.testing.assert_array_equal(occ, oracles.fb_occlusion(fwd, bwd))
    assert occ.sum() == 1 and occ[2, 1] == 1


def test_fb_threshold_is_inclusive():
    # |Uf + Ub|^2 == alpha2 exactly at zero magnitude terms
    fwd = np.zeros((3, 3, 2))
    bwd = np.zeros((3, 3, 2))
    occ = fc.occlusion_forward_backward(fwd, bwd, alpha1=0.0, alpha2=0.0)
    assert occ.all()


def test_fb_flip_invariance(rng):
    fwd = rng.uniform(-2, 2, (8, 8, 2))
    bwd = rng.uniform(-2, 2, (8, 8, 2))
    occ = fc.occlusion_forward_backward(fwd, bwd)

    def flip(f):
        out = f[:, ::-1].copy()
        out[..., 0] *= -1
        return out

    np.testing.assert_array_equal(fc.occlusion_forward_backward(flip(fwd), flip(bwd)), occ[:, ::-1])


def test_photometric_identical_images_zero(rng):
    img = rng.uniform(size=(8, 8, 3))
    assert float(fc.photometric_loss(img, img, np.zeros((8, 8))).values) == pytest.approx(0.0, abs=1e-12)


def test_photometric_all_occluded_zero_with_zero_grad(rng):
    ref = rng.uniform(size=(1, 6, 6, 3))
    warped = Tensor(rng.uniform(size=(1, 6, 6, 3)), requires_grad=True)
    with Graph() as g:
        loss = fc.photometric_loss(ref, warped, np.ones((1, 6, 6)))
        total = loss + (warped * 0.0).sum()
    grads = backward(g, total)
    assert float(loss.values) == 0.0
    np.testing.assert_array_equal(grads[warped.id], 0.0)


def test_photometric_constant_l1():
    cfg = fc.PhotometricConfig(l1_weight=1.0, ssim_weight=0.0)
    a = np.full((3, 3, 1), 0.2)
    b = np.full((3, 3, 1), 0.7)
    assert float(fc.photometric_loss(a, b, np.zeros((3, 3)), cfg).values) == pytest.approx(0.5)


def test_photometric_config_validation():
    with pytest.raises(ContractError):
        fc.PhotometricConfig(0.0, 0.0)
    with pytest.raises(ContractError):
        fc.PhotometricConfig(1.0, 0.0, ssim_window=4)


def test_photometric_excludes_occluded_pixels(rng):
    cfg = fc.PhotometricConfig(l1_weight=1.0, ssim_weight=0.0)
    a = rng.uniform(size=(4, 4, 1))
    b = a.copy()
    b[0, 0] += 0.5
    occ = np.zeros((4, 4))
    occ[0, 0] = 1
    assert float(fc.photometric_loss(a, b, occ, cfg).values) == pytest.approx(0.0, abs=1e-15)


def test_smoothness_constant_flow_zero(rng):
    flow = np.full((6, 6, 2), 1.5)
    assert float(fc.smoothness_loss(flow, rng.uniform(size=(6, 6, 3))).values) == 0.0


def test_smoothness_ramp_equals_slope():
    slope = 0.3
    flow = np.zeros((6, 9, 2))
    flow[..., 0] = slope * np.arange(9)
    img = np.full((6, 9, 1), 0.5)
    assert float(fc.smoothness_loss(flow, img).values) == pytest.approx(slope)


def test_smoothness_edge_aware():
    flow = np.zeros((6, 8, 2))
    flow[:, 4:, 0] = 2.0
    flat = np.full((6, 8, 1), 0.5)
    edge = flat.copy()
    edge[:, 4:] = 1.0
    assert float(fc.smoothness_loss(flow, edge).values) < float(fc.smoothness_loss(flow, flat).values)


def test_charbonnier_identical_floor():
    f = np.zeros((4, 4, 2))
    val = float(fc.charbonnier_consistency(f, f, np.zeros((4, 4))).values)
    assert val == pytest.approx(0.01 ** 0.4)
    assert val == pytest.approx(0.1585, abs=1e-4)


def test_charbonnier_single_pixel():
    ref = np.zeros((3, 3, 2))
    pred = np.zeros((3, 3, 2))
    pred[1, 1, 0] = 1.0
    scope = np.ones((3, 3))
    scope[1, 1] = 0
    val = float(fc.charbonnier_consistency(ref, pred, scope).values)
    assert val == pytest.approx(1.01 ** 0.4) and val == pytest.approx(1.00399, abs=1e-5)


def test_charbonnier_empty_scope_zero_grad(rng):
    pred = Tensor(rng.standard_normal((1, 3, 3, 2)), requires_grad=True)
    with Graph() as g:
        loss = fc.charbonnier_consistency(np.zeros((1, 3, 3, 2)), pred, np.ones((1, 3, 3)))
        total = loss + (pred * 0.0).sum()
    assert float(loss.values) == 0.0
    np.testing.assert_array_equal(backward(g, total)[pred.id], 0.0)


def test_charbonnier_matches_scalar(rng):
    ref = rng.standard_normal((5, 5, 2))
    pred = rng.standard_normal((5, 5, 2))
    scope = (rng.uniform(size=(5, 5)) < 0.3).astype(np.uint8)
    got = float(fc.charbonnier_consistency(ref, pred, scope).values)
    assert got == pytest.approx(oracles.charbonnier(ref, pred, scope), rel=1e-12)


@given(st.floats(1.01, 10.0), arrays(np.float64, (3, 3, 2), elements=st.floats(-3, 3)))
def test_charbonnier_monotone_in_scale(factor, diff):
    zero = np.zeros((3, 3, 2))
    scope = np.zeros((3, 3))
    base = float(fc.charbonnier_consistency(zero, diff, scope).values)
    scaled = float(fc.charbonnier_consistency(zero, diff * factor, scope).values)
    if np.abs(diff).sum() > 1e-6:
        assert scaled > base
    else:
        assert scaled >= base


@given(arrays(np.float64, (4, 4, 2), elements=st.floats(-2, 2)),
       arrays(np.float64, (4, 4, 3), elements=st.floats(0, 1)))
def test_losses_non_negative(flow, img):
    assert float(fc.smoothness_loss(flow, img).values) >= 0
    warped, _ = fc.warp(img, flow)
    assert float(fc.photometric_loss(img, warped, np.zeros((4, 4))).values) >= -1e-12
    assert float(fc.charbonnier_consistency(flow, flow * 0.5, np.zeros((4, 4))).values) >= 0


def test_as_image_clamps_and_rejects_nan():
    np.testing.assert_array_equal(fc.as_image([[-0.5, 1.5]]), [[0.0, 1.0]])
    with pytest.raises(ContractError):
        fc.as_image([np.nan])
