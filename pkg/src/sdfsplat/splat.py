"""Differentiable forward rasterization of the Gaussian set.

Per-pixel effective opacity is ``alpha * exp(-1/2 d^T Sigma'^-1 d)`` capped
at 0.99; contributions below 1/255 are skipped.  Gaussians are blended
front to back (stable depth order) over axis-aligned screen bounding boxes
of 3.5 sigma — wide enough that everything outside the box is already below
the 1/255 cutoff, so box culling never changes the image.

All screen-space math is written as explicit component expressions (the
``*_formula`` helpers) that accept either tape Values or plain floats;
the test-suite oracle re-evaluates them scalar-wise, which keeps the
production image bit-comparable to the brute-force blending reference.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Value, _nary
from .gaussians import GaussianSet, Camera, BLUR_FLOOR, SH_C1

ALPHA_CAP = 0.99
ALPHA_CUTOFF = 1.0 / 255.0
FOOTPRINT_SIGMA = 3.5


def _sqrt(v):
    return v.sqrt() if isinstance(v, Value) else np.sqrt(v)


def _exp(v):
    return v.exp() if isinstance(v, Value) else np.exp(v)


def _sigmoid(v):
    if isinstance(v, Value):
        return v.sigmoid()
    from .autodiff import _sigmoid as np_sigmoid
    return np_sigmoid(v)


def _minimum(a, b):
    return a.minimum(b) if isinstance(a, Value) else np.minimum(a, b)


def _maximum(a, b):
    return a.maximum(b) if isinstance(a, Value) else np.maximum(a, b)


def screen_space_formula(qw, qx, qy, qz, s0, s1, s2, px, py, pz, cam: Camera):
    """Camera-space center, projected mean, and projected 2x2 covariance.

    Polymorphic over Values / arrays / floats; fixed expression order so
    scalar re-evaluation reproduces the vectorized path bit-for-bit.
    """
    R, t = cam.R, cam.t
    xc = R[0, 0] * px + R[0, 1] * py + R[0, 2] * pz + t[0]
    yc = R[1, 0] * px + R[1, 1] * py + R[1, 2] * pz + t[1]
    zc = R[2, 0] * px + R[2, 1] * py + R[2, 2] * pz + t[2]
    u = cam.fx * xc / zc + cam.cx
    v = cam.fy * yc / zc + cam.cy

    nq = _sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
    w, x, y, z = qw / nq, qx / nq, qy / nq, qz / nq
    r00 = 1.0 - 2.0 * (y * y + z * z)
    r01 = 2.0 * (x * y - w * z)
    r02 = 2.0 * (x * z + w * y)
    r10 = 2.0 * (x * y + w * z)
    r11 = 1.0 - 2.0 * (x * x + z * z)
    r12 = 2.0 * (y * z - w * x)
    r20 = 2.0 * (x * z - w * y)
    r21 = 2.0 * (y * z + w * x)
    r22 = 1.0 - 2.0 * (x * x + y * y)

    m00, m01, m02 = r00 * s0, r01 * s1, r02 * s2
    m10, m11, m12 = r10 * s0, r11 * s1, r12 * s2
    m20, m21, m22 = r20 * s0, r21 * s1, r22 * s2

    c00 = m00 * m00 + m01 * m01 + m02 * m02
    c01 = m00 * m10 + m01 * m11 + m02 * m12
    c02 = m00 * m20 + m01 * m21 + m02 * m22
    c11 = m10 * m10 + m11 * m11 + m12 * m12
    c12 = m10 * m20 + m11 * m21 + m12 * m22
    c22 = m20 * m20 + m21 * m21 + m22 * m22

    j00 = cam.fx / zc
    j02 = -(cam.fx * xc) / (zc * zc)
    j11 = cam.fy / zc
    j12 = -(cam.fy * yc) / (zc * zc)

    v00 = j00 * R[0, 0] + j02 * R[2, 0]
    v01 = j00 * R[0, 1] + j02 * R[2, 1]
    v02 = j00 * R[0, 2] + j02 * R[2, 2]
    v10 = j11 * R[1, 0] + j12 * R[2, 0]
    v11 = j11 * R[1, 1] + j12 * R[2, 1]
    v12 = j11 * R[1, 2] + j12 * R[2, 2]

    u00 = v00 * c00 + v01 * c01 + v02 * c02
    u01 = v00 * c01 + v01 * c11 + v02 * c12
    u02 = v00 * c02 + v01 * c12 + v02 * c22
    u10 = v10 * c00 + v11 * c01 + v12 * c02
    u11 = v10 * c01 + v11 * c11 + v12 * c12
    u12 = v10 * c02 + v11 * c12 + v12 * c22

    s00 = u00 * v00 + u01 * v01 + u02 * v02 + BLUR_FLOOR
    s01 = u00 * v10 + u01 * v11 + u02 * v12
    s11 = u10 * v10 + u11 * v11 + u12 * v12 + BLUR_FLOOR
    return xc, yc, zc, u, v, s00, s01, s11


def conic_formula(s00, s01, s11):
    """Inverse of the 2x2 projected covariance as (a, b, c)."""
    det = s00 * s11 - s01 * s01
    return s11 / det, -(s01 / det), s00 / det


def alpha_hat_formula(alpha, ca, cb, cc, dx, dy):
    """Per-pixel effective opacity, capped at ALPHA_CAP."""
    q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
    return _minimum(alpha * _exp(-0.5 * q), ALPHA_CAP)


def sh_color_formula(bands, dxn, dyn, dzn):
    """Clamped SH color for one channel; bands is [H0] or [H0..H3]."""
    c = bands[0]
    if len(bands) > 1:
        c = c + bands[1] * (SH_C1 * dyn) + bands[2] * (SH_C1 * dzn) \
            + bands[3] * (SH_C1 * dxn)
    return _minimum(_maximum(c, 0.0), 1.0)


def view_dir_formula(px, py, pz, cam_center):
    """Unit direction from the camera center to each position."""
    dx = px - cam_center[0]
    dy = py - cam_center[1]
    dz = pz - cam_center[2]
    n = _sqrt(dx * dx + dy * dy + dz * dz)
    return dx / n, dy / n, dz / n


def depth_sort(gaussians: GaussianSet, cam: Camera):
    """Permutation sorting by camera-space depth, stable in Gaussian id."""
    z = gaussians.pos @ cam.R[2] + cam.t[2]
    return np.argsort(z, kind="stable")


def _scatter_accumulate(shape, idx_list, contribs):
    """Sum per-Gaussian contributions into a flat image in one tape op."""
    def fwd(*datas):
        out = np.zeros(shape)
        for idx, d in zip(idx_list, datas):
            out[idx] += d
        return out

    def bwd(g, y, *datas):
        return tuple(g[idx] for idx in idx_list)

    return _nary(list(contribs), fwd, bwd, "scatter_accumulate")


@dataclass
class SplatFrame:
    """Result of one rasterization, with tape handles for the backward pass."""
    image_value: Value
    tape: Tape
    params: dict
    width: int
    height: int
    order: np.ndarray                   # visible Gaussians, front to back
    mean2d: np.ndarray                  # (N, 2) projected means (data)
    depth: np.ndarray                   # (N,) camera-space z (data)
    radius: np.ndarray                  # (N,) footprint radius in px (data)
    u_value: Value = None               # projected mean components (for stats)
    v_value: Value = None
    contribs: list = None               # optional per-Gaussian (pixels, weights)

    @property
    def image(self):
        return self.image_value.data


def rasterize(gaussians: GaussianSet, cam: Camera, background,
              tape: Tape = None, P: dict = None, z_near=0.1, collect=False):
    """Rasterize the Gaussian set over `background`; returns a SplatFrame.

    Pass a tape + bound parameter Values to make the image differentiable;
    otherwise a throwaway tape is used (forward only).
    """
    if tape is None:
        tape = Tape()
        P = {k: tape.constant(v) for k, v in gaussians.params().items()}
    H, W = cam.height, cam.width
    n = len(gaussians)
    bg = tape._coerce(background)

    if n == 0:
        img = tape.constant(np.ones(H * W)).reshape(H * W, 1) * bg.reshape(1, 3)
        return SplatFrame(img.reshape(H, W, 3), tape, P or {}, W, H,
                          np.empty(0, int), np.empty((0, 2)), np.empty(0),
                          np.empty(0), contribs=[] if collect else None)

    pos, quat, log_s = P["pos"], P["quat"], P["log_s"]
    px, py, pz = pos[:, 0], pos[:, 1], pos[:, 2]
    s = log_s.exp()
    xc, yc, zc, u, v, s00, s01, s11 = screen_space_formula(
        quat[:, 0], quat[:, 1], quat[:, 2], quat[:, 3],
        s[:, 0], s[:, 1], s[:, 2], px, py, pz, cam)
    ca, cb, cc = conic_formula(s00, s01, s11)
    alpha = P["opacity_logit"].sigmoid()

    dxn, dyn, dzn = view_dir_formula(px, py, pz, cam.center)
    sh = P["sh"]
    k = gaussians.sh.shape[-1]
    chans = []
    for ch in range(3):
        bands = [sh[:, ch, j] for j in range(k)]
        chans.append(sh_color_formula(bands, dxn, dyn, dzn))
    from .autodiff import stack
    color = stack(chans, axis=-1)                                  # (N, 3)

    # footprint geometry (not differentiated)
    lam_max = 0.5 * (s00.data + s11.data) + np.sqrt(np.maximum(
        0.25 * (s00.data - s11.data) ** 2 + s01.data ** 2, 0.0))
    radius = FOOTPRINT_SIGMA * np.sqrt(lam_max)
    visible = zc.data > z_near
    order = np.argsort(zc.data, kind="stable")
    order = order[visible[order]]

    T = tape.constant(np.ones(H * W))
    idx_list, contrib_vals = [], []
    contribs = [] if collect else None
    for i in order:
        x0 = max(0, int(np.floor(u.data[i] - radius[i])))
        x1 = min(W - 1, int(np.ceil(u.data[i] + radius[i])))
        y0 = max(0, int(np.floor(v.data[i] - radius[i])))
        y1 = min(H - 1, int(np.ceil(v.data[i] + radius[i])))
        if x1 < x0 or y1 < y0:
            continue
        xs = np.arange(x0, x1 + 1)
        ys = np.arange(y0, y1 + 1)
        gx, gy = np.meshgrid(xs, ys)
        dx = tape.constant(gx.ravel() + 0.5) - u[i]
        dy = tape.constant(gy.ravel() + 0.5) - v[i]
        ah = alpha_hat_formula(alpha[i], ca[i], cb[i], cc[i], dx, dy)
        keep = ah.data >= ALPHA_CUTOFF
        if not keep.any():
            continue
        flat_idx = (gy.ravel() * W + gx.ravel())[keep]
        ahk = ah[keep]
        w = T[flat_idx] * ahk
        idx_list.append(flat_idx)
        contrib_vals.append(w.reshape(-1, 1) * color[i].reshape(1, 3))
        T = T.index_mul(flat_idx, 1.0 - ahk)
        if collect:
            contribs.append((int(i), flat_idx, w.data.copy()))

    if idx_list:
        img = _scatter_accumulate((H * W, 3), idx_list, contrib_vals)
        img = img + T.reshape(H * W, 1) * bg.reshape(1, 3)
    else:
        img = T.reshape(H * W, 1) * bg.reshape(1, 3)
    return SplatFrame(img.reshape(H, W, 3), tape, P, W, H, order,
                      np.stack([u.data, v.data], axis=-1), zc.data, radius,
                      u_value=u, v_value=v, contribs=contribs)


def rasterize_backward(frame: SplatFrame, d_image):
    """Gradients of sum(d_image * image) w.r.t. all Gaussian parameters."""
    d_image = np.asarray(d_image, dtype=np.float64)
    if d_image.shape != frame.image_value.data.shape:
        raise ValueError("d_image shape must match the rendered image")
    frame.tape.backward(frame.image_value, seed=d_image)
    out = {}
    for k, val in frame.params.items():
        out[k] = np.zeros_like(val.data) if val.grad is None else val.grad.copy()
    return out


@dataclass
class DensifyConfig:
    tau_grad: float = 2e-4        # mean positional gradient, normalized coords
    tau_alpha: float = 0.005      # prune opacities below this
    scale_div: float = 1.6        # children scale divisor
    interval: int = 100           # gaussian-iterations between densify calls
    max_gaussians: int = 4000


def densify_and_prune(gaussians: GaussianSet, stats, cfg: DensifyConfig):
    """Split high-gradient Gaussians, drop transparent ones.

    `stats`: per-Gaussian mean positional-gradient magnitude (normalized
    image coordinates).  Returns (new_set, carry), where carry[i] is the
    source row in the old set or -1 for freshly created children.
    """
    n = len(gaussians)
    alpha = 1.0 / (1.0 + np.exp(-gaussians.opacity_logit))
    keep = alpha >= cfg.tau_alpha
    split = (np.asarray(stats) > cfg.tau_grad) & keep
    if n + split.sum() > cfg.max_gaussians:
        split &= np.zeros(n, bool)
    carry_keep = np.nonzero(keep & ~split)[0]
    parts = [gaussians.select(carry_keep)]
    carry = [carry_keep]
    for i in np.nonzero(split)[0]:
        g = gaussians.gaussian(i)
        from .gaussians import quat_to_rotation
        R = quat_to_rotation(g.r)
        j = int(np.argmax(g.s))
        offset = R[:, j] * g.s[j]
        for sign in (+1.0, -1.0):
            child = GaussianSet(
                pos=(g.p + sign * offset)[None],
                quat=g.r[None].copy(),
                log_s=(g.log_s - np.log(cfg.scale_div))[None],
                opacity_logit=np.array([g.opacity_logit]),
                sh=g.H[None].copy())
            parts.append(child)
            carry.append(np.array([-1]))
    new = GaussianSet.concatenate(parts)
    return new, np.concatenate(carry)
