"""SDF-based volume rendering and the implicit-surface losses.

A ray's opacity comes from consecutive SDF samples through a learnable
logistic: ``alpha_i = max((Phi(f_i) - Phi(f_{i+1})) / Phi(f_i), 0)`` with
``Phi(x) = sigmoid(inv_s * x)``.  Colors are alpha-composited front to back
and the residual transmittance falls onto a learnable constant background.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Value, ContractViolation, stack, _nary
from .sdf import SdfNetwork, clamp_to_ball


def _fd_gradient(f_off: Value, m, scale):
    """(M,3) central differences from stacked offset evals (+x,-x,+y,...)."""
    def fwd(a):
        r = a.reshape(6, m)
        return np.stack([r[0] - r[1], r[2] - r[3], r[4] - r[5]],
                        axis=-1) * scale

    def bwd(g, y, a):
        out = np.empty((6, m))
        for i in range(3):
            gi = g[:, i] * scale
            out[2 * i] = gi
            out[2 * i + 1] = -gi
        return (out.reshape(a.shape),)

    return _nary([f_off], fwd, bwd, "fd_gradient")


def _fd_laplacian(f_off: Value, f_c: Value, m, inv_eps2):
    """(M,) discrete Laplacian (sum of second differences, unsigned)."""
    def fwd(a, c):
        return (a.reshape(6, m).sum(axis=0) - 6.0 * c) * inv_eps2

    def bwd(g, y, a, c):
        return (np.tile(g * inv_eps2, 6).reshape(a.shape),
                g * (-6.0 * inv_eps2))

    return _nary([f_off, f_c], fwd, bwd, "fd_laplacian")


class NonFiniteLossError(RuntimeError):
    """A loss term became NaN/inf; message names the term."""


@dataclass
class RaySample:
    o: np.ndarray              # origin (3,)
    d: np.ndarray              # unit direction (3,)
    t: np.ndarray              # sorted sample distances (N,), possibly empty


@dataclass
class LossWeights:
    lambda1: float = 0.1       # eikonal
    lambda2: float = 1.0       # surface points
    w_curv: float = 5e-4       # curvature (scaled with the lr schedule)


def ray_sphere_intersect(o, d, radius=1.0, t_floor=1e-4):
    """Entry/exit distances of rays with the bounding sphere.

    Returns (t0, t1, hit); rows with hit == False have no valid interval.
    """
    o = np.atleast_2d(o)
    d = np.atleast_2d(d)
    b = np.sum(o * d, axis=-1)
    c = np.sum(o * o, axis=-1) - radius * radius
    disc = b * b - c
    hit = disc > 0.0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = np.maximum(-b - sq, t_floor)
    t1 = -b + sq
    hit &= t1 > t0
    return t0, t1, hit


def stratified_t(t0, t1, n, rng):
    """One uniform draw per stratum of [t0, t1]. t0/t1: (B,) -> (B, n)."""
    B = t0.shape[0]
    u = rng.random((B, n))
    edges = (np.arange(n) + u) / n
    return t0[:, None] + edges * (t1 - t0)[:, None]


def sample_ray(cam, pixel, n, rng):
    """Stratified samples of one pixel's ray inside the unit sphere."""
    o, d = cam.ray(pixel[0], pixel[1])
    t0, t1, hit = ray_sphere_intersect(o[None], d[None])
    if not hit[0]:
        return RaySample(o, d, np.empty(0))
    t = stratified_t(t0, t1, n, rng)[0]
    return RaySample(o, d, t)


def resample_importance(t, weights, n, rng):
    """One round of inverse-CDF resampling proportional to interval weights.

    `t`: (B, N) coarse samples, `weights`: (B, N-1) interval masses.
    Returns (B, n) sorted samples.
    """
    B, N = t.shape
    w = weights + 1e-8
    cdf = np.cumsum(w, axis=-1)
    cdf = cdf / cdf[:, -1:]
    cdf = np.concatenate([np.zeros((B, 1)), cdf], axis=-1)      # (B, N)
    u = (np.arange(n) + rng.random((B, n))) / n
    idx = np.clip(np.array([np.searchsorted(cdf[i], u[i], side="right")
                            for i in range(B)]) - 1, 0, N - 2)
    lo = np.take_along_axis(cdf, idx, axis=-1)
    hi = np.take_along_axis(cdf, idx + 1, axis=-1)
    frac = (u - lo) / np.maximum(hi - lo, 1e-12)
    t_lo = np.take_along_axis(t, idx, axis=-1)
    t_hi = np.take_along_axis(t, idx + 1, axis=-1)
    return np.sort(t_lo + frac * (t_hi - t_lo), axis=-1)


def sdf_to_alpha(f_i, f_next, inv_s):
    """Opacity of one marching step from consecutive SDF values."""
    if isinstance(f_i, Value) or isinstance(inv_s, Value):
        phi_i = (f_i * inv_s).sigmoid()
        phi_n = (f_next * inv_s).sigmoid()
        return ((phi_i - phi_n) / phi_i).relu()
    phi_i = 1.0 / (1.0 + np.exp(-inv_s * np.asarray(f_i, float)))
    phi_n = 1.0 / (1.0 + np.exp(-inv_s * np.asarray(f_next, float)))
    return np.maximum((phi_i - phi_n) / phi_i, 0.0)


def composite_weights(alpha):
    """Blend weights T_i * alpha_i and the final transmittance."""
    if isinstance(alpha, Value):
        T = (1.0 - alpha).cumprod_exclusive(axis=-1)
        w = T * alpha
        t_final = T[:, -1] * (1.0 - alpha[:, -1])
        return w, t_final
    T = np.cumprod(np.concatenate(
        [np.ones_like(alpha[..., :1]), 1.0 - alpha[..., :-1]], axis=-1), axis=-1)
    w = T * alpha
    return w, T[..., -1] * (1.0 - alpha[..., -1])


def render_rays(tape: Tape, P, net: SdfNetwork, o, d, t, inv_s, bg,
                with_curvature=True):
    """Volume-render a batch of rays on the tape.

    o, d: (B,3); t: (B,N) sample distances (all points inside the ball).
    inv_s, bg are Values (sharpness scalar, background RGB).
    Returns a dict of Values: color (B,3), weights (B,N-1), acc (B,),
    grads (B*N,3), curv (B*N,), f (B,N).
    """
    B, N = t.shape
    pts = o[:, None, :] + t[:, :, None] * d[:, None, :]
    flat = pts.reshape(-1, 3)
    eps = net.grad_eps()

    offs = []
    for i in range(3):
        e = np.zeros(3)
        e[i] = eps
        offs.append(flat + e)
        offs.append(flat - e)
    off_pts = clamp_to_ball(np.concatenate(offs))

    f_c, feat = net.sdf_head(tape, P, flat)
    f_off, _ = net.sdf_head(tape, P, off_pts)
    M = B * N
    grads = _fd_gradient(f_off, M, 0.5 / eps)                     # (M, 3)

    curv = None
    if with_curvature:
        curv = _fd_laplacian(f_off, f_c, M, 1.0 / (eps * eps)).abs()

    view = np.broadcast_to(d[:, None, :], (B, N, 3)).reshape(-1, 3)
    c = net.color_head(tape, P, flat, grads, view, feat).reshape(B, N, 3)

    f = f_c.reshape(B, N)
    alpha = sdf_to_alpha(f[:, :-1], f[:, 1:], inv_s)
    w, _ = composite_weights(alpha)
    acc = w.sum(axis=-1)
    color = (w.reshape(B, N - 1, 1) * c[:, :-1, :]).sum(axis=1) \
        + (1.0 - acc).reshape(B, 1) * bg
    return {"color": color, "weights": w, "acc": acc, "grads": grads,
            "curv": curv, "f": f}


def render_image(net: SdfNetwork, cam, inv_s, bg, n_samples=48, chunk=2048):
    """Render every pixel through the volume renderer (no gradients).

    Sampling is deterministic (stratum midpoints), so renders are
    reproducible without an rng.
    """
    us, vs = np.meshgrid(np.arange(cam.width) + 0.5,
                         np.arange(cam.height) + 0.5)
    o, d = cam.ray(us.ravel(), vs.ravel())
    t0, t1, hit = ray_sphere_intersect(o, d)
    bg = np.asarray(bg, float)
    img = np.tile(bg, (cam.height * cam.width, 1))
    idx = np.nonzero(hit)[0]
    mids = (np.arange(n_samples) + 0.5) / n_samples
    for i in range(0, len(idx), chunk):
        sel = idx[i:i + chunk]
        t = t0[sel][:, None] + mids[None, :] * (t1 - t0)[sel][:, None]
        tape = Tape()
        P = {k: tape.constant(v) for k, v in net.params.items()}
        out = render_rays(tape, P, net, o[sel], d[sel], t,
                          tape.constant(inv_s), tape.constant(bg),
                          with_curvature=False)
        img[sel] = out["color"].data
    return img.reshape(cam.height, cam.width, 3)


def render_ray(net: SdfNetwork, sample: RaySample, inv_s, bg=None):
    """Render one ray with plain-array outputs (thin wrapper for tests/CLI)."""
    bg = np.zeros(3) if bg is None else np.asarray(bg, float)
    if sample.t.size == 0:
        return bg.copy(), np.empty(0), 0.0
    tape = Tape()
    P = {k: tape.constant(v) for k, v in net.params.items()}
    out = render_rays(tape, P, net, sample.o[None], sample.d[None],
                      sample.t[None], tape.constant(inv_s), tape.constant(bg),
                      with_curvature=False)
    return out["color"].data[0], out["weights"].data[0], float(out["acc"].data[0])


# ---- losses ------------------------------------------------------------------


def loss_rgb(rendered, target):
    """Mean absolute error over all channels of the batch."""
    if isinstance(rendered, Value):
        if rendered.data.shape != np.asarray(target).shape:
            raise ContractViolation("rgb loss shape mismatch")
        return (rendered - rendered.tape.constant(target)).abs().mean()
    rendered = np.asarray(rendered, float)
    target = np.asarray(target, float)
    if rendered.shape != target.shape:
        raise ContractViolation("rgb loss shape mismatch")
    return float(np.abs(rendered - target).mean())


def loss_eikonal(grads):
    """Mean squared deviation of gradient norms from 1."""
    if isinstance(grads, Value):
        return ((grads.norm(axis=-1) - 1.0) ** 2).mean()
    n = np.linalg.norm(np.asarray(grads, float), axis=-1)
    return float(((n - 1.0) ** 2).mean())


def loss_point(net: SdfNetwork, points, tape=None, P=None):
    """Mean |f| over points inside the unit ball.

    Returns (loss, n_used); points outside the ball are skipped.  With no
    usable points the loss is 0 (flagged by n_used == 0).
    """
    points = np.atleast_2d(np.asarray(points, float))
    inside = np.linalg.norm(points, axis=-1) <= 1.0
    n_used = int(inside.sum())
    if tape is None:
        if n_used == 0:
            return 0.0, 0
        return float(np.abs(net.f_np(points[inside])).mean()), n_used
    if n_used == 0:
        return tape.constant(0.0), 0
    f, _ = net.sdf_head(tape, P, points[inside])
    return f.abs().mean(), n_used


def loss_total(parts: dict, weights: LossWeights, w_curv_eff=None):
    """L_rgb + lambda1*L_eik + lambda2*L_pt (+ curvature term).

    `parts` maps term name -> Value or float; missing terms count as 0.
    Raises NonFiniteLossError naming the first non-finite term.
    """
    for name, v in parts.items():
        val = v.data if isinstance(v, Value) else v
        if not np.all(np.isfinite(val)):
            raise NonFiniteLossError(f"loss term {name!r} is not finite")
    wc = weights.w_curv if w_curv_eff is None else w_curv_eff
    total = parts["rgb"]
    if "eik" in parts:
        total = total + weights.lambda1 * parts["eik"]
    if "pt" in parts:
        total = total + weights.lambda2 * parts["pt"]
    if "curv" in parts and wc != 0.0:
        total = total + wc * parts["curv"]
    return total
