"""PLY reading/writing: plain point clouds plus a Gaussian attribute
extension, with unknown properties preserved opaquely on rewrite.

Supported encodings: ascii 1.0 and binary_little_endian 1.0.  Point clouds
default to double precision so write-then-read round-trips exactly.

Gaussian attribute extension (all double): x y z, rot_0..rot_3 (quaternion
wxyz), scale_0..scale_2 (log scales), opacity (logit), f_dc_0..f_dc_2 and
f_band_* (SH coefficients, channel-major).
"""
from __future__ import annotations

import os

import numpy as np

from .gaussians import GaussianSet

_PLY_TYPES = {
    "char": "i1", "uchar": "u1", "short": "i2", "ushort": "u2",
    "int": "i4", "uint": "u4", "float": "f4", "double": "f8",
    "int8": "i1", "uint8": "u1", "int16": "i2", "uint16": "u2",
    "int32": "i4", "uint32": "u4", "float32": "f4", "float64": "f8",
}
_INV_TYPES = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort",
              "i4": "int", "u4": "uint", "f4": "float", "f8": "double"}


class PlyParseError(ValueError):
    def __init__(self, msg, offset=None):
        if offset is not None:
            msg = f"{msg} (byte offset {offset})"
        super().__init__(msg)
        self.offset = offset


class PlyElement:
    """One PLY element: ordered (name, numpy dtype char) properties + columns."""

    def __init__(self, name, count, properties, data):
        self.name = name
        self.count = count
        self.properties = properties          # list of (prop name, dtype str)
        self.data = data                      # dict prop name -> (count,) array


def read_ply(path):
    """Parse a PLY file into an ordered dict of PlyElement."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"ply"):
        raise PlyParseError("missing 'ply' magic", 0)
    end = raw.find(b"end_header\n")
    if end < 0:
        raise PlyParseError("missing end_header", len(raw))
    body_off = end + len(b"end_header\n")
    header = raw[:end].decode("ascii", errors="replace").splitlines()

    fmt = None
    elements = []                       # (name, count, [(prop, dtype)])
    for line in header[1:]:
        tok = line.split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "format":
            if tok[1] not in ("ascii", "binary_little_endian"):
                raise PlyParseError(f"unsupported format {tok[1]}", 0)
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if tok[1] == "list":
                raise PlyParseError("list properties not supported", 0)
            if not elements:
                raise PlyParseError("property before element", 0)
            if tok[1] not in _PLY_TYPES:
                raise PlyParseError(f"unknown property type {tok[1]}", 0)
            elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt is None:
        raise PlyParseError("missing format line", 0)

    out = {}
    off = body_off
    if fmt == "binary_little_endian":
        for name, count, props in elements:
            dt = np.dtype([(p, "<" + t) for p, t in props])
            nbytes = dt.itemsize * count
            if off + nbytes > len(raw):
                raise PlyParseError(
                    f"element {name!r} truncated: need {nbytes} bytes", off)
            rec = np.frombuffer(raw[off:off + nbytes], dtype=dt)
            off += nbytes
            out[name] = PlyElement(name, count, props,
                                   {p: rec[p].astype(t) for p, t in props})
    else:
        text = raw[body_off:].decode("ascii", errors="replace").split()
        pos = 0
        for name, count, props in elements:
            need = count * len(props)
            if pos + need > len(text):
                raise PlyParseError(
                    f"element {name!r} truncated: need {need} ascii values",
                    body_off)
            block = np.array(text[pos:pos + need], dtype=np.float64)
            pos += need
            block = block.reshape(count, len(props))
            data = {p: block[:, i].astype(t)
                    for i, (p, t) in enumerate(props)}
            out[name] = PlyElement(name, count, props, data)
    return out


def write_ply(path, elements, binary=True):
    """Write PlyElements (atomic); column dtypes become PLY property types."""
    lines = ["ply",
             "format binary_little_endian 1.0" if binary else "format ascii 1.0"]
    for el in elements.values():
        lines.append(f"element {el.name} {el.count}")
        for p, t in el.properties:
            lines.append(f"property {_INV_TYPES[t]} {p}")
    lines.append("end_header")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        for el in elements.values():
            if binary:
                dt = np.dtype([(p, "<" + t) for p, t in el.properties])
                rec = np.empty(el.count, dtype=dt)
                for p, t in el.properties:
                    rec[p] = el.data[p]
                f.write(rec.tobytes())
            else:
                cols = [el.data[p] for p, _ in el.properties]
                for i in range(el.count):
                    f.write((" ".join(repr(float(c[i])) for c in cols) + "\n")
                            .encode("ascii"))
    os.replace(tmp, path)


def points_to_ply(path, points, normals=None, binary=True):
    """Write an (N,3) point cloud (double precision)."""
    points = np.asarray(points, dtype=np.float64)
    props = [("x", "f8"), ("y", "f8"), ("z", "f8")]
    data = {"x": points[:, 0], "y": points[:, 1], "z": points[:, 2]}
    if normals is not None:
        normals = np.asarray(normals, dtype=np.float64)
        props += [("nx", "f8"), ("ny", "f8"), ("nz", "f8")]
        data.update(nx=normals[:, 0], ny=normals[:, 1], nz=normals[:, 2])
    write_ply(path, {"vertex": PlyElement("vertex", len(points), props, data)},
              binary=binary)


def ply_to_points(path):
    """(points, normals-or-None) from any PLY with x/y/z properties."""
    elems = read_ply(path)
    if "vertex" not in elems:
        raise PlyParseError("no vertex element")
    v = elems["vertex"]
    try:
        pts = np.stack([v.data["x"], v.data["y"], v.data["z"]], axis=-1)
    except KeyError as e:
        raise PlyParseError(f"vertex element lacks property {e}")
    pts = pts.astype(np.float64)
    if all(k in v.data for k in ("nx", "ny", "nz")):
        nrm = np.stack([v.data["nx"], v.data["ny"], v.data["nz"]], axis=-1)
        return pts, nrm.astype(np.float64)
    return pts, None


def gaussians_to_ply(path, gaussians: GaussianSet, binary=True):
    """Write a GaussianSet with the documented attribute extension."""
    n = len(gaussians)
    k = gaussians.sh.shape[-1]
    props = [("x", "f8"), ("y", "f8"), ("z", "f8")]
    data = {"x": gaussians.pos[:, 0], "y": gaussians.pos[:, 1],
            "z": gaussians.pos[:, 2]}
    for i in range(4):
        props.append((f"rot_{i}", "f8"))
        data[f"rot_{i}"] = gaussians.quat[:, i]
    for i in range(3):
        props.append((f"scale_{i}", "f8"))
        data[f"scale_{i}"] = gaussians.log_s[:, i]
    props.append(("opacity", "f8"))
    data["opacity"] = gaussians.opacity_logit
    for ch in range(3):
        props.append((f"f_dc_{ch}", "f8"))
        data[f"f_dc_{ch}"] = gaussians.sh[:, ch, 0]
    for ch in range(3):
        for j in range(1, k):
            name = f"f_band_{ch}_{j - 1}"
            props.append((name, "f8"))
            data[name] = gaussians.sh[:, ch, j]
    write_ply(path, {"vertex": PlyElement("vertex", n, props, data)},
              binary=binary)


def ply_to_gaussians(path):
    """Read a GaussianSet written by gaussians_to_ply."""
    v = read_ply(path)["vertex"]
    n = v.count
    pos = np.stack([v.data["x"], v.data["y"], v.data["z"]], axis=-1)
    quat = np.stack([v.data[f"rot_{i}"] for i in range(4)], axis=-1)
    log_s = np.stack([v.data[f"scale_{i}"] for i in range(3)], axis=-1)
    op = v.data["opacity"].astype(np.float64)
    nband = sum(1 for p, _ in v.properties if p.startswith("f_band_0_"))
    sh = np.zeros((n, 3, 1 + nband))
    for ch in range(3):
        sh[:, ch, 0] = v.data[f"f_dc_{ch}"]
        for j in range(nband):
            sh[:, ch, 1 + j] = v.data[f"f_band_{ch}_{j}"]
    return GaussianSet(pos.astype(np.float64), quat.astype(np.float64),
                       log_s.astype(np.float64), op, sh)
