import math

import numpy as np
import pytest

from deformsplat.geometry import build_covariance
from deformsplat.losses import (
    LossWeights,
    NeighborGraph,
    combine_components,
    cov_consistency_loss,
    masked_l1_color,
    masked_l1_depth,
    pos_consistency_loss,
    psnr,
    ssim,
    ssim_loss,
    total_loss,
    tv_smooth_loss,
)

from gradcheck import central_diff, random_unit_quats, rel_err


# -- masked L1 ----------------------------------------------------------------

def test_l1_color_zero_when_equal(rng):
    img = rng.uniform(0, 1, (8, 8, 3))
    val, grad = masked_l1_color(img, img, np.zeros((8, 8)))
    assert val == 0.0
    assert not grad.any()


def test_l1_color_ignores_masked_error(rng):
    img = rng.uniform(0, 1, (8, 8, 3))
    mask = np.zeros((8, 8))
    mask[2:4, 2:4] = 1
    rendered = img.copy()
    rendered[2:4, 2:4] += 0.5
    val, grad = masked_l1_color(rendered, img, mask)
    assert val == 0.0
    assert not grad[2:4, 2:4].any()


def test_l1_color_uniform_error():
    img = np.full((6, 6, 3), 0.3)
    rendered = img + 0.1
    val, _ = masked_l1_color(rendered, img, np.zeros((6, 6)))
    assert np.isclose(val, 0.1)


def test_l1_color_all_masked_raises():
    with pytest.raises(ValueError, match="fully masked"):
        masked_l1_color(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), np.ones((4, 4)))


def test_l1_depth_skips_invalid(rng):
    target = np.full((6, 6), 2.0)
    target[0, :] = 0.0  # invalid ground truth
    rendered = target + 0.2
    val, grad = masked_l1_depth(rendered, target, np.zeros((6, 6)))
    assert np.isclose(val, 0.2)
    assert not grad[0, :].any()


def test_l1_gradients_match_fd(rng):
    img = rng.uniform(0.2, 0.8, (6, 6, 3))
    target = rng.uniform(0.2, 0.8, (6, 6, 3))
    mask = (rng.uniform(size=(6, 6)) < 0.3).astype(np.uint8)
    _, grad = masked_l1_color(img, target, mask)
    fd = central_diff(lambda x: masked_l1_color(x, target, mask)[0], img)
    assert rel_err(grad, fd) < 1e-6


# -- deformation consistency ----------------------------------------------------

def _chain_graph():
    # two gaussians, mutual neighbors
    return NeighborGraph(
        indices=np.array([[1], [0]]), distances=np.zeros((2, 1)), k=1
    )


def test_pos_loss_identity_exact_zero(rng):
    x = rng.normal(size=(20, 3))
    graph = NeighborGraph.build(x, k=5)
    val, gc, go = pos_consistency_loss(graph, x, x)
    assert val == 0.0
    assert not gc.any() and not go.any()


def test_pos_loss_rigid_translation(rng):
    x = rng.normal(size=(30, 3))
    graph = NeighborGraph.build(x, k=5)
    val, _, _ = pos_consistency_loss(graph, x, x + np.array([0.3, -1.2, 2.0]))
    assert val < 1e-10


def test_pos_loss_joint_rotation_invariance(rng):
    from test_geometry import rodrigues

    x = rng.normal(size=(25, 3))
    x_o = x + rng.normal(size=(25, 3)) * 0.1
    graph = NeighborGraph.build(x, k=4)
    base, _, _ = pos_consistency_loss(graph, x, x_o)
    rot = rodrigues(np.array([0.2, 1.0, -0.4]), 0.8)
    rotated, _, _ = pos_consistency_loss(graph, x @ rot.T, x_o @ rot.T)
    assert np.isclose(base, rotated, atol=1e-12)


def test_pos_loss_direct_example():
    x_c = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    x_o = np.array([[0.0, 0, 0], [2.0, 0, 0]])
    val, _, _ = pos_consistency_loss(_chain_graph(), x_c, x_o)
    assert np.isclose(val, 1.0)


def test_pos_loss_gradients_fd(rng):
    x_c = rng.normal(size=(10, 3))
    x_o = x_c + rng.normal(size=(10, 3)) * 0.2
    graph = NeighborGraph.build(x_c, k=3)
    _, gc, go = pos_consistency_loss(graph, x_c, x_o)
    fd_c = central_diff(lambda a: pos_consistency_loss(graph, a, x_o)[0], x_c)
    fd_o = central_diff(lambda a: pos_consistency_loss(graph, x_c, a)[0], x_o)
    assert rel_err(gc, fd_c) < 1e-5
    assert rel_err(go, fd_o) < 1e-5


def test_cov_loss_identity_exact_zero(rng):
    s = rng.uniform(0.2, 1.0, (12, 3))
    q = random_unit_quats(rng, 12)
    cov = build_covariance(s, q)
    graph = NeighborGraph.build(rng.normal(size=(12, 3)), k=4)
    val, gc, go = cov_consistency_loss(graph, cov, cov)
    assert val == 0.0
    assert not gc.any() and not go.any()


def test_cov_loss_frobenius_example():
    # canonical pair 1.0 apart (Frobenius), observed pair 3.0 apart -> 2.0
    cov_c = np.stack([np.eye(3), np.eye(3) + np.diag([1.0, 0, 0])])
    cov_o = np.stack([np.eye(3), np.eye(3) + np.diag([3.0, 0, 0])])
    val, _, _ = cov_consistency_loss(_chain_graph(), cov_c, cov_o)
    assert np.isclose(val, 2.0)


def test_cov_loss_identical_neighbors_contribute_zero():
    cov_c = np.stack([np.eye(3), np.eye(3)])
    cov_o = np.stack([2 * np.eye(3), 2 * np.eye(3)])
    val, _, _ = cov_consistency_loss(_chain_graph(), cov_c, cov_o)
    assert val == 0.0


def test_cov_loss_gradients_fd(rng):
    s = rng.uniform(0.3, 1.0, (8, 3))
    cov_c = build_covariance(s, random_unit_quats(rng, 8))
    cov_o = cov_c + rng.normal(size=(8, 3, 3)) * 0.05
    cov_o = 0.5 * (cov_o + np.swapaxes(cov_o, -1, -2))
    graph = NeighborGraph.build(rng.normal(size=(8, 3)), k=3)
    _, gc, go = cov_consistency_loss(graph, cov_c, cov_o)
    fd_c = central_diff(lambda a: cov_consistency_loss(graph, a, cov_o)[0], cov_c)
    fd_o = central_diff(lambda a: cov_consistency_loss(graph, cov_c, a)[0], cov_o)
    assert rel_err(gc, fd_c) < 1e-5
    assert rel_err(go, fd_o) < 1e-5


# -- total variation -------------------------------------------------------------

def test_tv_constant_image_zero():
    img = np.full((6, 6, 3), 0.4)
    mask = np.zeros((6, 6), dtype=np.uint8)
    mask[2:4, 2:4] = 1
    val, grad = tv_smooth_loss(img, mask)
    assert val == 0.0
    assert not grad.any()


def test_tv_empty_mask_zero(rng):
    val, grad = tv_smooth_loss(rng.uniform(0, 1, (5, 5, 3)), np.zeros((5, 5)))
    assert val == 0.0
    assert not grad.any()


def test_tv_two_pixel_strip_hand_value():
    # row [1, 0, 1] in one channel; mask covers columns 1 and 2 (n = 2)
    img = np.zeros((1, 3, 3))
    img[0, 0, 0] = 1.0
    img[0, 2, 0] = 1.0
    mask = np.array([[0, 1, 1]], dtype=np.uint8)
    val, _ = tv_smooth_loss(img, mask)
    # center (0,1): (0-1)^2 = 1; center (0,2): (1-0)^2 = 1; total 2 / n=2
    assert np.isclose(val, 1.0)


def test_tv_couples_across_mask_boundary():
    img = np.zeros((1, 2, 3))
    img[0, 0, :] = 1.0  # visible neighbor differs from masked pixel
    mask = np.array([[0, 1]], dtype=np.uint8)
    val, grad = tv_smooth_loss(img, mask)
    assert val > 0.0
    assert grad[0, 0].any()  # gradient reaches the visible neighbor


def test_tv_gradient_fd(rng):
    img = rng.uniform(0, 1, (6, 7, 3))
    mask = (rng.uniform(size=(6, 7)) < 0.4).astype(np.uint8)
    _, grad = tv_smooth_loss(img, mask)
    fd = central_diff(lambda x: tv_smooth_loss(x, mask)[0], img)
    assert rel_err(grad, fd) < 1e-6


# -- SSIM ------------------------------------------------------------------------

def _ssim_direct(a, b, mask=None):
    """Independent oracle: literal sliding-window SSIM with a clipped,
    renormalized 11x11 Gaussian window."""
    h, w, c = a.shape
    half = 5
    xs = np.arange(11) - 5.0
    k1d = np.exp(-0.5 * (xs / 1.5) ** 2)
    k1d /= k1d.sum()
    k2d = np.outer(k1d, k1d)
    c1, c2 = 0.01**2, 0.03**2
    total, count = 0.0, 0
    for i in range(h):
        for j in range(w):
            if mask is not None and mask[i, j] != 0:
                continue
            i0, i1 = max(0, i - half), min(h, i + half + 1)
            j0, j1 = max(0, j - half), min(w, j + half + 1)
            win = k2d[i0 - i + half : i1 - i + half, j0 - j + half : j1 - j + half]
            win = win / win.sum()
            s_channels = []
            for ch in range(c):
                wa = a[i0:i1, j0:j1, ch]
                wb = b[i0:i1, j0:j1, ch]
                mu_a = (win * wa).sum()
                mu_b = (win * wb).sum()
                va = (win * wa * wa).sum() - mu_a**2
                vb = (win * wb * wb).sum() - mu_b**2
                vab = (win * wa * wb).sum() - mu_a * mu_b
                s_channels.append(
                    ((2 * mu_a * mu_b + c1) * (2 * vab + c2))
                    / ((mu_a**2 + mu_b**2 + c1) * (va + vb + c2))
                )
            total += np.mean(s_channels)
            count += 1
    return total / count


def test_ssim_identical_images(rng):
    img = rng.uniform(0, 1, (12, 12, 3))
    assert np.isclose(ssim(img, img), 1.0)
    val, grad = ssim_loss(img, img)
    assert np.isclose(val, 0.0, atol=1e-12)


def test_ssim_inverted_image_below_one(rng):
    img = rng.uniform(0, 1, (12, 12, 3))
    assert ssim(img, 1.0 - img) < 1.0


def test_ssim_matches_direct_formula_oracle(rng):
    a = rng.uniform(0, 1, (8, 8, 3))
    b = rng.uniform(0, 1, (8, 8, 3))
    assert abs(ssim(a, b) - _ssim_direct(a, b)) < 1e-6
    mask = (rng.uniform(size=(8, 8)) < 0.3).astype(np.uint8)
    assert abs(ssim(a, b, mask) - _ssim_direct(a, b, mask)) < 1e-6


def test_ssim_gradient_fd(rng):
    a = rng.uniform(0.2, 0.8, (8, 8, 3))
    b = rng.uniform(0.2, 0.8, (8, 8, 3))
    mask = np.zeros((8, 8), dtype=np.uint8)
    mask[0, 3] = 1
    _, grad = ssim_loss(a, b, mask)
    fd = central_diff(lambda x: ssim_loss(x, b, mask)[0], a)
    assert rel_err(grad, fd) < 1e-6


# -- PSNR -------------------------------------------------------------------------

def test_psnr_formula():
    a = np.zeros((4, 4, 3))
    b = np.full((4, 4, 3), 0.1)  # mse = 0.01 -> 20 dB
    assert np.isclose(psnr(a, b), 20.0)


def test_psnr_identical_inf():
    a = np.full((4, 4, 3), 0.3)
    assert psnr(a, a) == math.inf


def test_psnr_40db():
    a = np.zeros((4, 4, 3))
    b = np.full((4, 4, 3), 0.01)  # mse = 1e-4 -> 40 dB
    assert np.isclose(psnr(a, b), 40.0)


def test_masked_metrics_invariant_under_masked_changes(rng):
    img = rng.uniform(0.2, 0.8, (32, 32, 3))
    target = rng.uniform(0.2, 0.8, (32, 32, 3))
    depth = rng.uniform(1, 3, (32, 32))
    d_target = rng.uniform(1, 3, (32, 32))
    mask = np.zeros((32, 32), dtype=np.uint8)
    mask[10:22, 10:22] = 1

    changed = img.copy()
    changed[16, 16] += 0.31  # deep inside the mask (beyond the SSIM window)
    d_changed = depth.copy()
    d_changed[16, 16] += 1.0

    assert masked_l1_color(img, target, mask)[0] == masked_l1_color(
        changed, target, mask
    )[0]
    assert masked_l1_depth(depth, d_target, mask)[0] == masked_l1_depth(
        d_changed, d_target, mask
    )[0]
    assert psnr(img, target, mask) == psnr(changed, target, mask)
    assert np.isclose(ssim(img, target, mask), ssim(changed, target, mask), atol=1e-14)

    # L1/PSNR are invariant for changes anywhere under the mask
    edge = img.copy()
    edge[10, 10] += 0.2
    assert masked_l1_color(img, target, mask)[0] == masked_l1_color(
        edge, target, mask
    )[0]
    assert psnr(img, target, mask) == psnr(edge, target, mask)


# -- composition --------------------------------------------------------------------

def test_combine_components_paper_weights():
    ones = {k: 1.0 for k in ("color", "ssim", "depth", "pos", "cov", "smooth")}
    total = combine_components(ones, LossWeights())
    assert abs(total - 202.221) < 1e-9


def test_zero_weight_removes_exactly_that_gradient(rng):
    h = w = 12
    n = 10
    rendered = rng.uniform(0.2, 0.8, (h, w, 3))
    rendered_d = rng.uniform(1.5, 2.5, (h, w))
    image = rng.uniform(0.2, 0.8, (h, w, 3))
    depth = rng.uniform(1.5, 2.5, (h, w))
    mask = (rng.uniform(size=(h, w)) < 0.2).astype(np.uint8)
    never = (rng.uniform(size=(h, w)) < 0.1).astype(np.uint8)
    x_c = rng.normal(size=(n, 3))
    x_o = x_c + rng.normal(size=(n, 3)) * 0.1
    cov_c = build_covariance(rng.uniform(0.2, 0.6, (n, 3)), random_unit_quats(rng, n))
    cov_o = cov_c * 1.1
    graph = NeighborGraph.build(x_c, k=3)

    def run(weights):
        return total_loss(
            rendered, rendered_d, image, depth, mask, never, graph,
            x_c, x_o, cov_c, cov_o, weights,
        )

    full_total, comps, full = run(LossWeights())
    for name, attr in [
        ("ssim", "d_color"), ("smooth", "d_color"), ("depth", "d_depth"),
        ("pos", "d_x_o"), ("cov", "d_cov_o"),
    ]:
        weights = LossWeights(**{name: 0.0})
        zero_total, _, zeroed = run(weights)
        default = getattr(LossWeights(), name)
        assert np.isclose(zero_total, full_total - default * comps[name])
        # the component's own gradient is exactly the difference
        diff = getattr(full, attr) - getattr(zeroed, attr)
        single = run(LossWeights(**{n2: 0.0 for n2 in
                                    ("ssim", "smooth", "depth", "pos", "cov")
                                    if n2 != name}))[2]
        base_only = run(LossWeights(ssim=0, smooth=0, depth=0, pos=0, cov=0))[2]
        own = getattr(single, attr) - getattr(base_only, attr)
        assert np.allclose(diff, own, rtol=1e-10, atol=1e-14)
