"""Scale flattening and normal alignment for the Gaussian set.

Driving each Gaussian's smallest scale to zero squeezes it into a disk
whose minimal-scale axis acts as a surface normal; that normal is aligned
(up to sign) with the implicit-surface gradient, and the flattened centers
are exported as surface points for the SDF's point loss.
"""
from __future__ import annotations

import numpy as np

from .autodiff import Tape, Value
from .gaussians import Gaussian3D, GaussianSet, quat_to_rotation


def loss_scale(gaussians: GaussianSet, tape: Tape = None, P: dict = None):
    """Mean over Gaussians of min(s1, s2, s3).

    Gradient flows only into the minimal component; ties break to the
    lowest index.
    """
    if tape is None:
        s = np.exp(gaussians.log_s)
        return float(s.min(axis=1).mean())
    s = P["log_s"].exp()
    jmin = np.argmin(s.data, axis=1)[:, None]
    return s.take_along(jmin).mean()


def gaussian_normal(g: Gaussian3D):
    """World normal of one flattened Gaussian: R column of the min scale."""
    R = quat_to_rotation(g.r)
    j = int(np.argmin(g.s))
    return R[:, j]


def rotation_entries_formula(qw, qx, qy, qz):
    """Rotation-matrix entries of normalized quaternions, row-major 9-tuple.

    Polymorphic over Values / arrays (componentwise expressions).
    """
    if isinstance(qw, Value):
        nq = (qw * qw + qx * qx + qy * qy + qz * qz).sqrt()
    else:
        nq = np.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
    w, x, y, z = qw / nq, qx / nq, qy / nq, qz / nq
    return (1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
            2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
            2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y))


def world_normals(gaussians: GaussianSet, tape: Tape = None, P: dict = None):
    """Minimal-scale-axis world normals for the whole set.

    numpy (N,3) without a tape; with a tape, a (N,3) Value whose gradient
    flows into the quaternions (the argmin selection is constant).
    """
    if tape is None:
        jmin = np.argmin(np.exp(gaussians.log_s), axis=1)
        normals = np.empty((len(gaussians), 3))
        for i in range(len(gaussians)):
            normals[i] = quat_to_rotation(gaussians.quat[i])[:, jmin[i]]
        return normals
    quat = P["quat"]
    r = rotation_entries_formula(quat[:, 0], quat[:, 1], quat[:, 2], quat[:, 3])
    jmin = np.argmin(np.exp(P["log_s"].data), axis=1)
    oh = np.zeros((len(gaussians), 3))
    oh[np.arange(len(gaussians)), jmin] = 1.0
    nx = r[0] * oh[:, 0] + r[1] * oh[:, 1] + r[2] * oh[:, 2]
    ny = r[3] * oh[:, 0] + r[4] * oh[:, 1] + r[5] * oh[:, 2]
    nz = r[6] * oh[:, 0] + r[7] * oh[:, 1] + r[8] * oh[:, 2]
    from .autodiff import stack
    return stack([nx, ny, nz], axis=-1)


def loss_align(gaussians: GaussianSet, field, tape: Tape = None, P: dict = None,
               net_P: dict = None, stop_sdf=True, grad_eps=None):
    """Mean |1 - |n_w . n_hat|| between Gaussian normals and SDF normals.

    n_hat is the normalized SDF gradient at each center.  Centers outside
    the unit ball or with degenerate gradients are skipped.  With
    `stop_sdf` the SDF is a fixed prior (no gradient into its parameters);
    otherwise the gradient evaluations live on the tape too.

    Returns (loss, n_used).
    """
    centers = gaussians.pos
    inside = np.linalg.norm(centers, axis=-1) <= 1.0

    if tape is None or stop_sdf:
        g = field.grad_np(centers) if grad_eps is None \
            else field.grad_np(centers, eps=grad_eps)
        gn = np.linalg.norm(g, axis=-1)
        ok = inside & (gn >= 1e-8)
        n_used = int(ok.sum())
        if n_used == 0:
            return (0.0 if tape is None else tape.constant(0.0)), 0
        nhat = g[ok] / gn[ok, None]
        if tape is None:
            nw = world_normals(gaussians)[ok]
            dots = np.sum(nw * nhat, axis=-1)
            return float(np.abs(1.0 - np.abs(dots)).mean()), n_used
        nw = world_normals(gaussians, tape, P)[np.nonzero(ok)[0]]
        dots = (nw * tape.constant(nhat)).sum(axis=-1)
        return (1.0 - dots.abs()).abs().mean(), n_used

    # fully differentiable path: SDF gradient by central differences on tape
    eps = grad_eps if grad_eps is not None else field.grad_eps()
    ok = inside
    idx = np.nonzero(ok)[0]
    n_used = int(ok.sum())
    if n_used == 0:
        return tape.constant(0.0), 0
    pts = centers[idx]
    offs = []
    for i in range(3):
        e = np.zeros(3)
        e[i] = eps
        offs.append(pts + e)
        offs.append(pts - e)
    f_off, _ = field.sdf_head(tape, net_P, np.concatenate(offs))
    M = len(idx)
    from .autodiff import stack
    g = stack([(f_off[2 * i * M:(2 * i + 1) * M]
                - f_off[(2 * i + 1) * M:(2 * i + 2) * M]) * (0.5 / eps)
               for i in range(3)], axis=-1)
    nhat = g * (1.0 / g.norm(axis=-1, keepdims=True))
    nw = world_normals(gaussians, tape, P)[idx]
    dots = (nw * nhat).sum(axis=-1)
    return (1.0 - dots.abs()).abs().mean(), n_used


def export_surface_points(gaussians: GaussianSet, tau_alpha=0.5, tau_flat=1e-3,
                          extra_points=None):
    """Centers of opaque, flattened Gaussians (optionally merged with an
    imported point cloud)."""
    alpha = 1.0 / (1.0 + np.exp(-gaussians.opacity_logit))
    min_s = np.exp(gaussians.log_s).min(axis=1)
    keep = (alpha >= tau_alpha) & (min_s <= tau_flat)
    pts = gaussians.pos[keep].copy()
    if extra_points is not None and len(extra_points):
        pts = np.concatenate([pts, np.asarray(extra_points, float)])
    return pts
