"""Binary checkpoint: magic, version, JSON header, raw little-endian
float64 arrays.  Writes are atomic (temp file + rename) so an interrupted
run never leaves a truncated checkpoint that later loads.

Layout:
    8 bytes   magic  b"SDFSPLAT"
    u32 LE    version (1)
    u64 LE    header length
    bytes     header JSON: {"sdf_config", "train_config", "active_levels",
                            "iteration", "arrays": [[name, shape], ...]}
    ...       arrays as float64 LE, in header order
Array names: sdf parameters under "sdf/", Gaussian blocks under "gauss/",
renderer scalars under "render/".
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .gaussians import GaussianSet
from .sdf import SdfNetwork, SdfConfig

MAGIC = b"SDFSPLAT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class TrainState:
    net: SdfNetwork
    gaussians: GaussianSet
    log_inv_s: np.ndarray          # shape ()
    bg_logit: np.ndarray           # shape (3,)
    iteration: int = 0
    train_config: dict = None


def save_checkpoint(path, state: TrainState):
    arrays = {}
    for k, v in state.net.params.items():
        arrays[f"sdf/{k}"] = v
    for k, v in state.gaussians.params().items():
        arrays[f"gauss/{k}"] = v
    arrays["render/log_inv_s"] = np.atleast_1d(state.log_inv_s)
    arrays["render/bg_logit"] = state.bg_logit

    header = {
        "sdf_config": asdict(state.net.cfg),
        "train_config": state.train_config or {},
        "active_levels": state.net.active_levels,
        "iteration": state.iteration,
        "arrays": [[k, list(v.shape)] for k, v in arrays.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for k, _ in header["arrays"]:
            f.write(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> TrainState:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<Q", raw, 12)
    header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    off = 20 + hlen

    arrays = {}
    for name, shape in header["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw[off:off + 8 * n], dtype="<f8", count=n)
        if arr.size != n:
            raise CheckpointError(f"array {name!r} truncated")
        arrays[name] = arr.astype(np.float64).reshape(shape)
        off += 8 * n

    cfg = SdfConfig(**header["sdf_config"])
    net = SdfNetwork(cfg, seed=0)
    net.active_levels = int(header["active_levels"])
    for k in net.params:
        key = f"sdf/{k}"
        if key not in arrays:
            raise CheckpointError(f"missing sdf parameter {k!r}")
        net.params[k] = arrays[key]
    gaussians = GaussianSet(
        pos=arrays["gauss/pos"], quat=arrays["gauss/quat"],
        log_s=arrays["gauss/log_s"],
        opacity_logit=arrays["gauss/opacity_logit"], sh=arrays["gauss/sh"])
    return TrainState(
        net=net, gaussians=gaussians,
        log_inv_s=arrays["render/log_inv_s"].reshape(()),
        bg_logit=arrays["render/bg_logit"],
        iteration=int(header["iteration"]),
        train_config=header.get("train_config") or {})
