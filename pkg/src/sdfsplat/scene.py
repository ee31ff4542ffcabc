"""Scene ingestion and synthetic ground-truth generation.

A scene directory holds ``manifest.json``, an ``images/`` folder, the
ground-truth mesh (synthetic scenes), and optionally an imported point
cloud.  All scene content is assumed to live inside the unit sphere after
the manifest's declared bounds are applied.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .autodiff import DomainError
from .gaussians import Camera
from .fields import PRESETS, numerical_gradient
from .imgio import write_png, read_png, png_size
from .mesh import marching_cubes, write_mesh_ply
from .plyio import ply_to_points, points_to_ply

TEST_FRACTION = 0.07


class SceneLoadError(ValueError):
    """Manifest/image validation failure; message carries the field path."""


@dataclass
class LoadedScene:
    root: str
    cameras: list                      # Camera per view (normalized to unit ball)
    images: list                       # (H,W,3) float64 per view
    train_idx: np.ndarray
    test_idx: np.ndarray
    points: np.ndarray = None          # imported point cloud or None

    @property
    def train_cameras(self):
        return [self.cameras[i] for i in self.train_idx]


def split_train_test(n, seed, fraction=TEST_FRACTION):
    """Deterministic shuffle; first floor(fraction*n) views become test."""
    perm = np.random.default_rng(seed).permutation(n)
    n_test = int(np.floor(fraction * n))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def save_manifest(path, cameras, width, height, bounds_center=(0, 0, 0),
                  bounds_radius=1.0, point_cloud=None, split_seed=0,
                  test_fraction=TEST_FRACTION):
    doc = {
        "width": width,
        "height": height,
        "test_fraction": test_fraction,
        "split_seed": split_seed,
        "bounds": {"center": list(map(float, bounds_center)),
                   "radius": float(bounds_radius)},
        "point_cloud": point_cloud,
        "cameras": [
            {"image": c.image_path, "fx": c.fx, "fy": c.fy,
             "cx": c.cx, "cy": c.cy,
             "R": c.R.tolist(), "t": c.t.tolist()} for c in cameras],
    }
    tmp = str(path) + ".tmp"
    with open(tmp, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def load_scene(root):
    """Validate and load a scene directory; raises SceneLoadError."""
    manifest_path = os.path.join(root, "manifest.json")
    try:
        with open(manifest_path) as f:
            doc = json.load(f)
    except FileNotFoundError:
        raise SceneLoadError(f"manifest not found: {manifest_path}")
    except json.JSONDecodeError as e:
        raise SceneLoadError(f"manifest: malformed JSON ({e})")

    for key in ("width", "height", "cameras", "bounds"):
        if key not in doc:
            raise SceneLoadError(f"manifest: missing field {key!r}")
    width, height = int(doc["width"]), int(doc["height"])
    center = np.asarray(doc["bounds"]["center"], dtype=np.float64)
    radius = float(doc["bounds"]["radius"])

    cameras, images = [], []
    for i, cdoc in enumerate(doc["cameras"]):
        where = f"cameras[{i}]"
        for key in ("image", "fx", "fy", "cx", "cy", "R", "t"):
            if key not in cdoc:
                raise SceneLoadError(f"manifest: {where}.{key} missing")
        img_path = os.path.join(root, cdoc["image"])
        if not os.path.exists(img_path):
            raise SceneLoadError(f"manifest: {where}.image not found: {img_path}")
        w, h = png_size(img_path)
        if (w, h) != (width, height):
            raise SceneLoadError(
                f"manifest: {where}.image is {w}x{h}, declared {width}x{height}")
        R = np.asarray(cdoc["R"], dtype=np.float64)
        t = np.asarray(cdoc["t"], dtype=np.float64)
        # normalize the declared bounding ball to the unit ball
        t_n = (t + R @ center) / radius
        try:
            cam = Camera(fx=float(cdoc["fx"]), fy=float(cdoc["fy"]),
                         cx=float(cdoc["cx"]), cy=float(cdoc["cy"]),
                         R=R, t=t_n, width=width, height=height,
                         image_path=cdoc["image"])
        except DomainError as e:
            raise SceneLoadError(f"manifest: {where}.R invalid: {e}")
        cameras.append(cam)
        images.append(read_png(img_path))

    points = None
    if doc.get("point_cloud"):
        pts, _ = ply_to_points(os.path.join(root, doc["point_cloud"]))
        points = (pts - center) / radius

    train_idx, test_idx = split_train_test(
        len(cameras), int(doc.get("split_seed", 0)),
        float(doc.get("test_fraction", TEST_FRACTION)))
    return LoadedScene(root, cameras, images, train_idx, test_idx, points)


# ---- synthetic ground truth ------------------------------------------------------


@dataclass
class SyntheticScene:
    preset: str = "sphere"
    n_views: int = 16
    resolution: int = 128
    cam_distance: float = 2.0
    elevations: tuple = (-30.0, 0.0, 30.0)
    fov_deg: float = 45.0
    light_dir: tuple = (0.4, 0.3, 0.85)
    ambient: float = 0.3
    background: tuple = (0.85, 0.88, 0.92)
    gt_mesh_res: int = 192
    point_cloud: bool = False
    point_cloud_n: int = 2000
    point_cloud_noise: float = 0.01
    seed: int = 0

    def field(self):
        return PRESETS[self.preset]()


def albedo(x):
    """Smooth positional color in [0.2, 0.9] (gives photometric signal)."""
    x = np.asarray(x, float)
    return np.clip(np.stack([0.55 + 0.5 * x[..., 0],
                             0.55 + 0.5 * x[..., 1],
                             0.55 + 0.5 * x[..., 2]], axis=-1), 0.2, 0.9)


def look_at_camera(position, fx_from_fov, width, height, target=(0, 0, 0),
                   up=(0, 0, 1.0), image_path=""):
    position = np.asarray(position, float)
    target = np.asarray(target, float)
    forward = target - position
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, float))
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    t = -R @ position
    return Camera(fx=fx_from_fov, fy=fx_from_fov, cx=width / 2.0,
                  cy=height / 2.0, R=R, t=t, width=width, height=height,
                  image_path=image_path)


def camera_ring(spec: SyntheticScene):
    fx = (spec.resolution / 2.0) / np.tan(np.radians(spec.fov_deg) / 2.0)
    cams = []
    for k in range(spec.n_views):
        theta = 2.0 * np.pi * k / spec.n_views
        phi = np.radians(spec.elevations[k % len(spec.elevations)])
        pos = spec.cam_distance * np.array([np.cos(phi) * np.cos(theta),
                                            np.cos(phi) * np.sin(theta),
                                            np.sin(phi)])
        cams.append(look_at_camera(pos, fx, spec.resolution, spec.resolution,
                                   image_path=f"images/view_{k:03d}.png"))
    return cams


def sphere_trace(fieldobj, o, d, t0, t1, iters=200, tol=1e-6):
    """March rays against an analytic SDF; returns (hit, points)."""
    t = t0.copy()
    alive = np.ones(len(t), dtype=bool)
    for _ in range(iters):
        p = o + t[:, None] * d
        fv = fieldobj.f_np(p)
        step = np.where(alive, fv, 0.0)
        t = t + step
        alive &= (np.abs(fv) > tol) & (t <= t1)
        if not alive.any():
            break
    p = o + t[:, None] * d
    hit = (np.abs(fieldobj.f_np(p)) <= 1e-4) & (t <= t1 + 1e-6)
    return hit, p


def render_ground_truth(fieldobj, cam: Camera, spec: SyntheticScene):
    """Lambertian + ambient shading of the analytic field."""
    us, vs = np.meshgrid(np.arange(cam.width) + 0.5,
                         np.arange(cam.height) + 0.5)
    o, d = cam.ray(us.ravel(), vs.ravel())
    from .neus import ray_sphere_intersect
    t0, t1, hit_sphere = ray_sphere_intersect(o, d)
    img = np.tile(np.asarray(spec.background, float),
                  (cam.height * cam.width, 1))
    if hit_sphere.any():
        oh, dh = o[hit_sphere], d[hit_sphere]
        hit, p = sphere_trace(fieldobj, oh, dh, t0[hit_sphere], t1[hit_sphere])
        if hit.any():
            ph = p[hit]
            n = fieldobj.grad_np(ph)
            n = n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)
            light = np.asarray(spec.light_dir, float)
            light = light / np.linalg.norm(light)
            diff = np.maximum(n @ light, 0.0)
            shade = spec.ambient + (1.0 - spec.ambient) * diff
            col = np.clip(albedo(ph) * shade[:, None], 0.0, 1.0)
            sel = np.nonzero(hit_sphere)[0][hit]
            img[sel] = col
    return img.reshape(cam.height, cam.width, 3)


def generate_synthetic(spec: SyntheticScene, out_dir):
    """Write a full synthetic scene directory; deterministic for a spec."""
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    fieldobj = spec.field()
    cams = camera_ring(spec)
    for cam in cams:
        img = render_ground_truth(fieldobj, cam, spec)
        write_png(os.path.join(out_dir, cam.image_path), img)
    gt_mesh = marching_cubes(fieldobj, spec.gt_mesh_res)
    write_mesh_ply(os.path.join(out_dir, "gt_mesh.ply"), gt_mesh)

    pc_name = None
    if spec.point_cloud:
        rng = np.random.default_rng(spec.seed)
        base = gt_mesh.sample_points(spec.point_cloud_n, rng)
        base += spec.point_cloud_noise * rng.standard_normal(base.shape)
        pc_name = "points.ply"
        points_to_ply(os.path.join(out_dir, pc_name), base)

    save_manifest(os.path.join(out_dir, "manifest.json"), cams,
                  spec.resolution, spec.resolution, point_cloud=pc_name,
                  split_seed=spec.seed)
    return out_dir
