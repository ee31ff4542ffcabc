import numpy as np
import pytest

from sdfsplat.gaussians import Camera
from sdfsplat.autodiff import _sigmoid as _np_sigmoid
from sdfsplat.splat import (ALPHA_CUTOFF, alpha_hat_formula, conic_formula,
                            depth_sort, screen_space_formula, sh_color_formula,
                            view_dir_formula)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_camera(width=8, height=8, fx=20.0, dist=2.0):
    return Camera(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0,
                  R=np.eye(3), t=np.array([0.0, 0.0, dist]),
                  width=width, height=height)


def brute_force_rasterize(gs, cam, bg, z_near=0.1):
    """Per-pixel blending oracle: explicit transmittance products over all
    Gaussians in depth order (scalar math, shared screen-space formulas)."""
    order = depth_sort(gs, cam)
    out = np.zeros((cam.height, cam.width, 3))
    cc = cam.center
    k = gs.sh.shape[-1]
    for iy in range(cam.height):
        for ix in range(cam.width):
            px, py = ix + 0.5, iy + 0.5
            color = np.zeros(3)
            trans = 1.0
            for i in order:
                qw, qx, qy, qz = gs.quat[i]
                s0, s1, s2 = np.exp(gs.log_s[i])
                p0, p1, p2 = gs.pos[i]
                _, _, zc, u, v, s00, s01, s11 = screen_space_formula(
                    qw, qx, qy, qz, s0, s1, s2, p0, p1, p2, cam)
                if zc <= z_near:
                    continue
                ca, cb, ccn = conic_formula(s00, s01, s11)
                alpha = _np_sigmoid(gs.opacity_logit[i])
                ah = alpha_hat_formula(alpha, ca, cb, ccn, px - u, py - v)
                if ah < ALPHA_CUTOFF:
                    continue
                dxn, dyn, dzn = view_dir_formula(p0, p1, p2, cc)
                col = np.array([
                    sh_color_formula([gs.sh[i, ch, j] for j in range(k)],
                                     dxn, dyn, dzn) for ch in range(3)])
                w = trans * ah
                color = color + w * col
                trans = trans * (1.0 - ah)
            out[iy, ix] = color + trans * bg
    return out


def random_test_gaussians(rng, n=5, radius=0.35, scale_lo=0.05, scale_hi=0.3):
    from sdfsplat.gaussians import random_gaussians
    gs = random_gaussians(n, rng, sh_degree=1, radius=radius)
    gs.log_s[:] = np.log(rng.uniform(scale_lo, scale_hi, gs.log_s.shape))
    gs.sh[:, :, 0] = rng.uniform(0.3, 0.7, (n, 3))
    gs.sh[:, :, 1:] = rng.uniform(-0.1, 0.1, gs.sh[:, :, 1:].shape)
    gs.opacity_logit[:] = rng.uniform(-0.5, 1.5, n)
    return gs
