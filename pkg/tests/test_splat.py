import numpy as np
import pytest

from sdfsplat.autodiff import Tape
from sdfsplat.gaussians import GaussianSet, random_gaussians
from sdfsplat.splat import (DensifyConfig, densify_and_prune, depth_sort,
                            rasterize, rasterize_backward)

from conftest import brute_force_rasterize, random_test_gaussians, small_camera

BG = np.array([0.1, 0.2, 0.3])


def test_empty_list_gives_background():
    cam = small_camera()
    gs = GaussianSet(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
                     np.zeros(0), np.zeros((0, 3, 4)))
    frame = rasterize(gs, cam, BG)
    assert np.array_equal(frame.image, np.tile(BG, (8, 8, 1)))


def test_one_opaque_gaussian_center_color(rng):
    cam = small_camera(width=16, height=16, fx=40.0)
    gs = random_test_gaussians(rng, n=1)
    gs.pos[0] = [0.0, 0.0, 0.0]
    gs.log_s[0] = np.log([0.4, 0.4, 0.4])     # large footprint
    gs.opacity_logit[0] = 20.0                # alpha ~ 1 -> capped 0.99
    gs.sh[0, :, 0] = [0.8, 0.4, 0.2]
    gs.sh[0, :, 1:] = 0.0
    frame = rasterize(gs, cam, BG)
    center = frame.image[8, 8]
    expect = 0.99 * gs.sh[0, :, 0] + 0.01 * BG
    assert np.abs(center - expect).max() < 1e-6


def test_bit_exact_vs_brute_force(rng):
    cam = small_camera()
    gs = random_test_gaussians(rng, n=5)
    frame = rasterize(gs, cam, BG)
    ref = brute_force_rasterize(gs, cam, BG)
    assert np.array_equal(frame.image, ref)


def test_pixels_outside_footprints_equal_background(rng):
    cam = small_camera(width=32, height=32, fx=60.0)
    gs = random_test_gaussians(rng, n=2, radius=0.1,
                               scale_lo=0.01, scale_hi=0.02)
    frame = rasterize(gs, cam, BG)
    touched = np.zeros((32, 32), dtype=bool)
    fr = rasterize(gs, cam, BG, collect=True)
    for _, idx, _ in fr.contribs:
        touched.ravel()[idx] = True
    untouched = ~touched
    assert untouched.any()
    assert np.array_equal(frame.image[untouched],
                          np.tile(BG, (untouched.sum(), 1)))


def test_telescoping_per_pixel(rng):
    cam = small_camera()
    gs = random_test_gaussians(rng, n=4)
    frame = rasterize(gs, cam, BG, collect=True)
    weights = np.zeros(64)
    for _, idx, w in frame.contribs:
        weights[idx] += w
    # contributions + residual transmittance must partition unity;
    # recover T from the image at a background-colored pixel is fragile,
    # so recompute: blend weights sum <= 1 and equality via the bg term
    ones = np.zeros(64)
    for _, idx, w in frame.contribs:
        ones[idx] += w
    # rebuild residual transmittance by re-rasterizing over a white bg
    white = rasterize(gs, cam, np.ones(3)).image.reshape(64, 3)
    black = rasterize(gs, cam, np.zeros(3)).image.reshape(64, 3)
    t_res = (white - black)[:, 0]
    assert np.abs(ones + t_res - 1.0).max() < 1e-12


def test_equal_depth_disjoint_permutation_invariance(rng):
    cam = small_camera(width=32, height=32, fx=60.0)
    gs = random_test_gaussians(rng, n=2, scale_lo=0.02, scale_hi=0.03)
    gs.pos[0] = [-0.4, 0.0, 0.0]
    gs.pos[1] = [0.4, 0.0, 0.0]     # same depth, disjoint footprints
    img1 = rasterize(gs, cam, BG).image
    gs2 = gs.select(np.array([1, 0]))
    img2 = rasterize(gs2, cam, BG).image
    assert np.array_equal(img1, img2)


def test_quaternion_double_cover_bit_identical(rng):
    cam = small_camera()
    gs = random_test_gaussians(rng, n=3)
    img1 = rasterize(gs, cam, BG).image
    gs.quat[1] = -gs.quat[1]
    img2 = rasterize(gs, cam, BG).image
    assert np.array_equal(img1, img2)


def test_depth_sort_examples(rng):
    cam = small_camera()
    gs = random_test_gaussians(rng, n=4)
    gs.pos[:, 2] = [0.0, 0.1, -0.2, 0.1]  # two equal depths (ids 1, 3)
    perm = depth_sort(gs, cam)
    z = gs.pos @ cam.R[2] + cam.t[2]
    assert np.all(np.diff(z[perm]) >= 0)
    # stability: id 1 before id 3 at equal depth
    assert list(perm).index(1) < list(perm).index(3)
    # already sorted input -> identity
    gs.pos[:, 2] = [-0.3, -0.1, 0.1, 0.3]
    assert np.array_equal(depth_sort(gs, cam), np.arange(4))


def test_rasterize_backward_zero_seed(rng):
    cam = small_camera()
    gs = random_test_gaussians(rng, n=3)
    tape = Tape()
    P = {k: tape.leaf(v) for k, v in gs.params().items()}
    frame = rasterize(gs, cam, BG, tape=tape, P=P)
    grads = rasterize_backward(frame, np.zeros((8, 8, 3)))
    assert all(np.all(g == 0.0) for g in grads.values())


def test_rasterize_backward_dc_coefficient_formula(rng):
    # loss = center-pixel red channel; dLoss/d(DC red) = alpha_hat * T
    cam = small_camera(width=16, height=16, fx=40.0)
    gs = random_test_gaussians(rng, n=1)
    gs.pos[0] = [0.0, 0.0, 0.0]
    gs.log_s[0] = np.log([0.3, 0.3, 0.3])
    gs.sh[0, :, 1:] = 0.0
    gs.sh[0, :, 0] = 0.5
    tape = Tape()
    P = {k: tape.leaf(v) for k, v in gs.params().items()}
    frame = rasterize(gs, cam, BG, tape=tape, P=P, collect=True)
    seed = np.zeros((16, 16, 3))
    seed[8, 8, 0] = 1.0
    grads = rasterize_backward(frame, seed)
    gid, idx, w = frame.contribs[0]
    flat = 8 * 16 + 8
    w_at_center = w[list(idx).index(flat)]
    assert abs(grads["sh"][0, 0, 0] - w_at_center) < 1e-12


def test_rasterize_backward_finite_differences(rng):
    cam = small_camera()
    gs = random_test_gaussians(rng, n=3)
    dimg = rng.standard_normal((8, 8, 3))
    tape = Tape()
    P = {k: tape.leaf(v) for k, v in gs.params().items()}
    frame = rasterize(gs, cam, BG, tape=tape, P=P)
    grads = rasterize_backward(frame, dimg)

    def loss_of():
        return float(np.sum(dimg * rasterize(gs, cam, BG).image))

    eps = 1e-6
    worst = 0.0
    for name, arr in gs.params().items():
        flat = arr.ravel()
        ga = grads[name].ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = loss_of()
            flat[j] = orig - eps
            fm = loss_of()
            flat[j] = orig
            fd = (fp - fm) / (2 * eps)
            worst = max(worst, abs(ga[j] - fd) / max(1.0, abs(fd)))
    assert worst < 1e-4


def test_rasterize_backward_shape_mismatch(rng):
    cam = small_camera()
    gs = random_test_gaussians(rng, n=2)
    tape = Tape()
    P = {k: tape.leaf(v) for k, v in gs.params().items()}
    frame = rasterize(gs, cam, BG, tape=tape, P=P)
    with pytest.raises(ValueError):
        rasterize_backward(frame, np.zeros((4, 4, 3)))


def test_densify_noop(rng):
    gs = random_test_gaussians(rng, n=6)
    gs.opacity_logit[:] = 2.0
    new, carry = densify_and_prune(gs, np.zeros(6), DensifyConfig())
    assert len(new) == 6 and np.array_equal(carry, np.arange(6))
    assert np.array_equal(new.pos, gs.pos)


def test_prune_low_opacity(rng):
    gs = random_test_gaussians(rng, n=4)
    gs.opacity_logit[:] = 2.0
    gs.opacity_logit[2] = np.log(1e-4 / (1 - 1e-4))   # alpha = 1e-4
    new, carry = densify_and_prune(gs, np.zeros(4), DensifyConfig())
    assert len(new) == 3
    assert 2 not in set(carry)


def test_split_high_gradient_covers_parent(rng):
    gs = random_test_gaussians(rng, n=1)
    gs.opacity_logit[:] = 2.0
    gs.log_s[0] = np.log([0.3, 0.1, 0.05])
    stats = np.array([1.0])  # way above tau_grad
    new, carry = densify_and_prune(gs, stats, DensifyConfig())
    assert len(new) == 2 and np.all(carry == -1)
    assert np.allclose(np.exp(new.log_s), np.exp(gs.log_s) / 1.6)
    # children sit +-sigma along the largest principal axis
    from sdfsplat.gaussians import quat_to_rotation, gaussian_density
    R = quat_to_rotation(gs.quat[0])
    axis = R[:, 0] * 0.3
    assert np.allclose(new.pos[0], gs.pos[0] + axis, atol=1e-12) \
        or np.allclose(new.pos[0], gs.pos[0] - axis, atol=1e-12)
    # sampled density envelope: children jointly keep >= half the parent
    # density along the split axis within 3 sigma
    parent = gs.gaussian(0)
    c1, c2 = new.gaussian(0), new.gaussian(1)
    ts = np.linspace(-3.0, 3.0, 25)
    pts = gs.pos[0] + np.outer(ts * 0.3, R[:, 0])
    ratio = (gaussian_density(c1, pts) + gaussian_density(c2, pts)) \
        / gaussian_density(parent, pts)
    assert ratio.min() > 0.5


def test_max_gaussians_respected(rng):
    gs = random_test_gaussians(rng, n=4)
    gs.opacity_logit[:] = 2.0
    cfg = DensifyConfig(max_gaussians=5)
    new, _ = densify_and_prune(gs, np.full(4, 1.0), cfg)
    assert len(new) <= 5
