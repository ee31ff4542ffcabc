"""Analytic signed-distance fields.

Used as ground truth for synthetic scenes and as exact-field oracles in
tests (a true distance field has unit gradient norm away from the medial
axis).  Sign convention: negative inside, normals along the gradient.
"""
from __future__ import annotations

import numpy as np


class SphereField:
    def __init__(self, radius=0.5, center=(0.0, 0.0, 0.0)):
        self.radius = float(radius)
        self.center = np.asarray(center, dtype=np.float64)

    def f_np(self, x):
        return np.linalg.norm(np.asarray(x, float) - self.center, axis=-1) - self.radius

    def grad_np(self, x, eps=None):
        d = np.asarray(x, float) - self.center
        n = np.linalg.norm(d, axis=-1, keepdims=True)
        return d / np.maximum(n, 1e-12)


class PlaneField:
    """f = dot(x, n) - offset for a unit normal n."""

    def __init__(self, normal=(0.0, 0.0, 1.0), offset=0.0):
        self.normal = np.asarray(normal, float)
        self.normal = self.normal / np.linalg.norm(self.normal)
        self.offset = float(offset)

    def f_np(self, x):
        return np.asarray(x, float) @ self.normal - self.offset

    def grad_np(self, x, eps=None):
        x = np.asarray(x, float)
        return np.broadcast_to(self.normal, x.shape).copy()


class BoxField:
    """Exact SDF of an axis-aligned box with given half extents."""

    def __init__(self, half=(0.35, 0.35, 0.35), center=(0.0, 0.0, 0.0)):
        self.half = np.asarray(half, dtype=np.float64)
        self.center = np.asarray(center, dtype=np.float64)

    def f_np(self, x):
        q = np.abs(np.asarray(x, float) - self.center) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def grad_np(self, x, eps=1e-6):
        return numerical_gradient(self.f_np, x, eps)


class TorusField:
    """Torus around the z axis: major radius R, tube radius r."""

    def __init__(self, major=0.45, minor=0.18, center=(0.0, 0.0, 0.0)):
        self.major = float(major)
        self.minor = float(minor)
        self.center = np.asarray(center, dtype=np.float64)

    def f_np(self, x):
        d = np.asarray(x, float) - self.center
        ring = np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2) - self.major
        return np.sqrt(ring ** 2 + d[..., 2] ** 2) - self.minor

    def grad_np(self, x, eps=1e-6):
        return numerical_gradient(self.f_np, x, eps)


class UnionField:
    def __init__(self, fields):
        self.fields = list(fields)

    def f_np(self, x):
        return np.min(np.stack([f.f_np(x) for f in self.fields]), axis=0)

    def grad_np(self, x, eps=1e-6):
        return numerical_gradient(self.f_np, x, eps)


class QuadraticField:
    """f = ||x||^2; constant Laplacian 6 (curvature test fixture)."""

    def f_np(self, x):
        x = np.asarray(x, float)
        return np.sum(x * x, axis=-1)

    def grad_np(self, x, eps=None):
        return 2.0 * np.asarray(x, float)


def numerical_gradient(f, x, eps):
    """Central differences per axis of a scalar field. x: (..., 3)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(3):
        dp = x.copy()
        dm = x.copy()
        dp[..., i] += eps
        dm[..., i] -= eps
        g[..., i] = (f(dp) - f(dm)) / (2.0 * eps)
    return g


def numerical_curvature(f, x, eps):
    """Absolute discrete Laplacian |sum_i (f+ + f- - 2 f0) / eps^2|."""
    x = np.asarray(x, dtype=np.float64)
    f0 = f(x)
    acc = np.zeros_like(f0)
    for i in range(3):
        dp = x.copy()
        dm = x.copy()
        dp[..., i] += eps
        dm[..., i] -= eps
        acc = acc + f(dp) + f(dm) - 2.0 * f0
    return np.abs(acc / (eps * eps))


PRESETS = {
    "sphere": lambda: SphereField(0.5),
    "box": lambda: BoxField((0.35, 0.35, 0.35)),
    "torus": lambda: TorusField(0.45, 0.18),
    "two_spheres": lambda: UnionField([SphereField(0.3, (-0.3, 0.0, 0.0)),
                                       SphereField(0.3, (0.3, 0.0, 0.0))]),
}
