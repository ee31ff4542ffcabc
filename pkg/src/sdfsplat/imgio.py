"""Image IO: 8-bit PNG for viewing, 32-bit PFM for golden-file comparisons.

Images are linear RGB float64 in [0,1] everywhere in the pipeline; no color
management is applied.
"""
from __future__ import annotations

import os

import numpy as np
from PIL import Image


def write_png(path, img):
    """Write a float [0,1] (H,W,3) image as 8-bit PNG (atomic)."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    tmp = str(path) + ".tmp"
    Image.fromarray(data, mode="RGB").save(tmp, format="PNG")
    os.replace(tmp, path)


def read_png(path):
    """Read a PNG as float64 RGB in [0,1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def png_size(path):
    """(width, height) from the PNG header without decoding pixels."""
    with Image.open(path) as im:
        return im.size


def write_pfm(path, img):
    """Write a float image as a little-endian PFM (color or grayscale)."""
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        header = b"Pf\n"
        plane = arr
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header = b"PF\n"
        plane = arr
    else:
        raise ValueError("PFM expects (H,W) or (H,W,3)")
    h, w = arr.shape[:2]
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")                      # negative scale = little endian
        f.write(np.flipud(plane).astype("<f4").tobytes())
    os.replace(tmp, path)


def read_pfm(path):
    """Read a PFM written by write_pfm (little- or big-endian)."""
    with open(path, "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"PF", b"Pf"):
            raise ValueError(f"not a PFM file: {path}")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        count = w * h * (3 if kind == b"PF" else 1)
        dt = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(count * 4), dtype=dt).astype(np.float64)
    shape = (h, w, 3) if kind == b"PF" else (h, w)
    return np.flipud(data.reshape(shape)).copy()
