"""Reconstruction and image-quality metrics: Chamfer distance, F1 score,
PSNR, SSIM.

Chamfer/F1 use exact nearest neighbors: brute force for small sets, a k-d
tree above BRUTE_FORCE_LIMIT points (identical results, verified in tests).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np
from scipy.spatial import cKDTree
from scipy.ndimage import convolve

BRUTE_FORCE_LIMIT = 10_000
PSNR_CAP = 99.0


@dataclass
class MetricReport:
    chamfer: float = float("nan")
    precision: float = float("nan")
    recall: float = float("nan")
    f1: float = float("nan")
    f1_threshold: float = float("nan")
    psnr: float = float("nan")
    ssim: float = float("nan")

    def to_json(self, path=None):
        payload = {k: v for k, v in asdict(self).items()
                   if not (isinstance(v, float) and np.isnan(v))}
        s = json.dumps(payload, indent=2, sort_keys=True)
        if path is not None:
            import os
            tmp = str(path) + ".tmp"
            with open(tmp, "w") as f:
                f.write(s + "\n")
            os.replace(tmp, path)
        return s


def _nn_dists(query, ref, force=None):
    """Distance from each query point to its nearest ref point."""
    method = force
    if method is None:
        method = "brute" if max(len(query), len(ref)) <= BRUTE_FORCE_LIMIT \
            else "kdtree"
    if method == "brute":
        out = np.empty(len(query))
        block = max(1, 10_000_000 // max(len(ref), 1))
        for i in range(0, len(query), block):
            d2 = np.sum((query[i:i + block, None, :] - ref[None, :, :]) ** 2,
                        axis=-1)
            out[i:i + block] = np.sqrt(d2.min(axis=1))
        return out
    return cKDTree(ref).query(query, k=1)[0]


def chamfer(a, b, force=None):
    """Bidirectional mean nearest-neighbor distance between point sets."""
    a = np.atleast_2d(np.asarray(a, float))
    b = np.atleast_2d(np.asarray(b, float))
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer requires nonempty point sets")
    return float(_nn_dists(a, b, force).mean() + _nn_dists(b, a, force).mean())


def f1_score(pred, gt, tau, force=None):
    """(precision, recall, f1) at distance threshold tau."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    gt = np.atleast_2d(np.asarray(gt, float))
    pred = np.atleast_2d(np.asarray(pred, float))
    if len(pred) == 0:
        return 0.0, 0.0, 0.0
    precision = float((_nn_dists(pred, gt, force) <= tau).mean())
    recall = float((_nn_dists(gt, pred, force) <= tau).mean())
    if precision + recall == 0.0:
        return precision, recall, 0.0
    return precision, recall, 2.0 * precision * recall / (precision + recall)


def psnr(a, b):
    """10 log10(1 / MSE) for images in [0,1]; identical images cap at 99 dB."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.shape != b.shape:
        raise ValueError("psnr: shape mismatch")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (r / sigma) ** 2)
    k2 = np.outer(k, k)
    return k2 / k2.sum()


def ssim(a, b, window=11, sigma=1.5, c1=0.01 ** 2, c2=0.03 ** 2):
    """Structural similarity, 11x11 Gaussian window, valid positions only.

    Color images are converted to grayscale as the channel mean.
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.shape != b.shape:
        raise ValueError("ssim: shape mismatch")
    if a.ndim == 3:
        a = a.mean(axis=-1)
        b = b.mean(axis=-1)
    if min(a.shape) < window:
        raise ValueError("image smaller than the SSIM window")
    k = _gaussian_window(window, sigma)

    def filt(img):
        return convolve(img, k, mode="constant")

    half = window // 2
    crop = (slice(half, a.shape[0] - half), slice(half, a.shape[1] - half))
    mu_a = filt(a)[crop]
    mu_b = filt(b)[crop]
    e_aa = filt(a * a)[crop]
    e_bb = filt(b * b)[crop]
    e_ab = filt(a * b)[crop]
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
