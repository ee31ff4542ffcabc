"""Gaussian primitive parameterization: covariance factorization, perspective
projection of covariances, and spherical-harmonics color evaluation.

Conventions:
  - quaternions are (w, x, y, z);
  - cameras are OpenCV-style pinhole, world-to-camera ``x_cam = R x + t``,
    looking down +z;
  - pixel (row i, col j) has continuous center ``(j + 0.5, i + 0.5)``;
  - the SH basis is ``[1, c1*y, c1*z, c1*x, ...]`` so the stored DC
    coefficient is the base color itself.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import DomainError

# scales below this are floored when inverting a covariance; the scale loss
# deliberately drives min scales to zero
EPS_SCALE = 1e-6

# 2D low-pass: added to the projected covariance diagonal (px^2)
BLUR_FLOOR = 0.3

# degree-1 real SH band coefficient sqrt(3 / 4pi)
SH_C1 = 0.48860251190291992


@dataclass
class Gaussian3D:
    """One splatting primitive."""
    p: np.ndarray               # center (3,)
    r: np.ndarray               # quaternion (4,), kept unit-norm
    log_s: np.ndarray           # log scales (3,)
    opacity_logit: float
    H: np.ndarray               # SH coefficients (3, k)

    @property
    def s(self):
        return np.exp(self.log_s)

    @property
    def alpha(self):
        return 1.0 / (1.0 + np.exp(-self.opacity_logit))


@dataclass
class Camera:
    """Pinhole camera: intrinsics + world-to-camera rigid transform."""
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray               # (3,3) world-to-camera rotation
    t: np.ndarray               # (3,) world-to-camera translation
    width: int
    height: int
    image_path: str = ""

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        err = np.abs(self.R @ self.R.T - np.eye(3)).max()
        if err > 1e-6:
            raise DomainError(f"camera rotation not orthonormal (err={err:.2e})")
        if np.linalg.det(self.R) < 0:
            raise DomainError("camera rotation has det -1")

    @property
    def center(self):
        """Camera position in world coordinates."""
        return -self.R.T @ self.t

    def to_cam(self, x):
        """World point(s) -> camera coordinates. x: (..., 3)."""
        return np.asarray(x) @ self.R.T + self.t

    def project(self, x):
        """World point(s) -> pixel coordinates (u, v) and depth z."""
        c = self.to_cam(x)
        z = c[..., 2]
        u = self.fx * c[..., 0] / z + self.cx
        v = self.fy * c[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    def ray(self, u, v):
        """World-space ray through continuous pixel coordinates (u, v)."""
        d_cam = np.stack([(np.asarray(u, float) - self.cx) / self.fx,
                          (np.asarray(v, float) - self.cy) / self.fy,
                          np.ones_like(np.asarray(u, float))], axis=-1)
        d = d_cam @ self.R       # R^T applied to rows
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
        o = np.broadcast_to(self.center, d.shape)
        return o, d


def quat_to_rotation(r):
    """Unit quaternion (w,x,y,z) -> 3x3 rotation matrix."""
    r = np.asarray(r, dtype=np.float64)
    n = np.linalg.norm(r)
    if n < 1e-12:
        raise DomainError("zero quaternion")
    w, x, y, z = r / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def covariance_3d(g: Gaussian3D):
    """World covariance R diag(s)^2 R^T of one Gaussian."""
    R = quat_to_rotation(g.r)
    return (R * g.s ** 2) @ R.T


def gaussian_density(g: Gaussian3D, x):
    """Unnormalized density exp(-1/2 (x-p)^T Sigma^-1 (x-p)), in (0, 1].

    Scales are floored at EPS_SCALE for the inversion so flattened
    Gaussians stay evaluable.
    """
    R = quat_to_rotation(g.r)
    s = np.maximum(g.s, EPS_SCALE)
    d = (np.asarray(x, float) - g.p) @ R   # into the Gaussian's local frame
    q = np.sum((d / s) ** 2, axis=-1)
    return np.exp(-0.5 * q)


def perspective_jacobian(t_cam, fx, fy):
    """Jacobian of (u, v) w.r.t. camera-space position at t_cam (2x3)."""
    x, y, z = t_cam
    return np.array([[fx / z, 0.0, -fx * x / (z * z)],
                     [0.0, fy / z, -fy * y / (z * z)]])


def project_covariance(g: Gaussian3D, cam: Camera, z_near=0.1,
                       orthographic=False):
    """Projected 2x2 covariance of a Gaussian under `cam`, or None if culled.

    Upper-left 2x2 block of J W Sigma W^T J^T with J the local affine
    approximation of the perspective projection, plus the low-pass floor
    on the diagonal.  `orthographic` replaces J by [I 0] (test hook).
    """
    t_cam = cam.to_cam(g.p)
    if t_cam[2] <= z_near:
        return None
    sigma = covariance_3d(g)
    if orthographic:
        J = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    else:
        J = perspective_jacobian(t_cam, cam.fx, cam.fy)
    M = J @ cam.R
    out = M @ sigma @ M.T
    out[0, 0] += BLUR_FLOOR
    out[1, 1] += BLUR_FLOOR
    out[1, 0] = out[0, 1]
    return out


def sh_basis(view_dir, degree):
    """Real SH basis values for unit directions, shape (..., (degree+1)^2).

    Band 0 is the constant 1 (stored DC coefficient is the base color);
    band 1 follows the (y, z, x) real SH ordering scaled by SH_C1.
    """
    d = np.asarray(view_dir, dtype=np.float64)
    k = (degree + 1) ** 2
    out = np.ones(d.shape[:-1] + (k,))
    if degree >= 1:
        out[..., 1] = SH_C1 * d[..., 1]
        out[..., 2] = SH_C1 * d[..., 2]
        out[..., 3] = SH_C1 * d[..., 0]
    if degree >= 2:
        raise NotImplementedError("SH degree > 1 not supported")
    return out


def sh_color(H, view_dir):
    """Per-channel SH color for a unit view direction, clamped to [0,1]."""
    H = np.asarray(H, dtype=np.float64)
    degree = int(round(np.sqrt(H.shape[-1]))) - 1
    b = sh_basis(view_dir, degree)
    return np.clip(np.sum(H * b[..., None, :], axis=-1), 0.0, 1.0)


@dataclass
class GaussianSet:
    """Struct-of-arrays Gaussian collection used by the renderer/trainer."""
    pos: np.ndarray             # (N, 3)
    quat: np.ndarray            # (N, 4)
    log_s: np.ndarray           # (N, 3)
    opacity_logit: np.ndarray   # (N,)
    sh: np.ndarray              # (N, 3, k)

    def __len__(self):
        return self.pos.shape[0]

    @property
    def sh_degree(self):
        return int(round(np.sqrt(self.sh.shape[-1]))) - 1

    def gaussian(self, i) -> Gaussian3D:
        return Gaussian3D(self.pos[i].copy(), self.quat[i].copy(),
                          self.log_s[i].copy(), float(self.opacity_logit[i]),
                          self.sh[i].copy())

    def normalize_quats(self):
        self.quat /= np.linalg.norm(self.quat, axis=1, keepdims=True)

    def params(self):
        """Named parameter arrays (shared references, not copies)."""
        return {"pos": self.pos, "quat": self.quat, "log_s": self.log_s,
                "opacity_logit": self.opacity_logit, "sh": self.sh}

    def select(self, idx):
        return GaussianSet(self.pos[idx].copy(), self.quat[idx].copy(),
                           self.log_s[idx].copy(),
                           self.opacity_logit[idx].copy(), self.sh[idx].copy())

    @staticmethod
    def concatenate(sets):
        return GaussianSet(
            np.concatenate([s.pos for s in sets]),
            np.concatenate([s.quat for s in sets]),
            np.concatenate([s.log_s for s in sets]),
            np.concatenate([s.opacity_logit for s in sets]),
            np.concatenate([s.sh for s in sets]))


def random_gaussians(n, rng, sh_degree=1, radius=0.8, base_color=None):
    """Uniform random Gaussians in a ball, isotropic scale = mean NN distance."""
    pts = rng.standard_normal((n, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    pts *= radius * rng.random((n, 1)) ** (1.0 / 3.0)
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    nn = float(np.sqrt(d2.min(axis=1)).mean())
    k = (sh_degree + 1) ** 2
    sh = np.zeros((n, 3, k))
    if base_color is None:
        sh[:, :, 0] = rng.uniform(0.3, 0.7, size=(n, 3))
    else:
        sh[:, :, 0] = np.asarray(base_color) + rng.uniform(-0.05, 0.05, (n, 3))
    quat = np.zeros((n, 4))
    quat[:, 0] = 1.0
    q_noise = rng.standard_normal((n, 4)) * 0.1
    quat += q_noise
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    return GaussianSet(
        pos=pts,
        quat=quat,
        log_s=np.full((n, 3), np.log(max(nn, 1e-3))),
        opacity_logit=np.full(n, 0.0),
        sh=sh)
