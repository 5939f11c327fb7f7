"""Small readers/writers for the on-disk formats used by the package.

PPM (binary P6), PFM (grayscale), TUM trajectories, calibration text and the
3DGS-style binary PLY map export.
"""
from __future__ import annotations

import os
import re
from pathlib import Path

import numpy as np

from .core import PoseSE3

SH_C0 = 0.28209479177387814


class UnreadableFile(IOError):
    def __init__(self, path, reason=""):
        self.path = str(path)
        super().__init__(f"cannot read {path}" + (f": {reason}" if reason else ""))


class MissingCalibration(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def write_ppm(path, image) -> None:
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.floor(img * 255.0 + 0.5).astype(np.uint8)
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise UnreadableFile(path, str(exc)) from exc
    # header: magic, width, height, maxval separated by whitespace (comments allowed)
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)").match(raw, pos)
        if m is None:
            raise UnreadableFile(path, "truncated PPM header")
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != b"P6":
        raise UnreadableFile(path, "not a binary PPM")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    n = w * h * 3
    arr = np.frombuffer(raw, dtype=dtype, count=n, offset=pos)
    if arr.size != n:
        raise UnreadableFile(path, "truncated PPM data")
    return arr.reshape(h, w, 3).astype(np.float64) / maxval


def write_pfm(path, depth) -> None:
    d = np.asarray(depth, dtype="<f4")
    h, w = d.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.flipud(d).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic not in (b"Pf", b"PF"):
            raise UnreadableFile(path, "not a PFM")
        w, h = (int(x) for x in f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        ch = 3 if magic == b"PF" else 1
        data = np.frombuffer(f.read(), dtype=dtype, count=w * h * ch)
    shape = (h, w, 3) if ch == 3 else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float64)


# ---------------------------------------------------------------------------
# clouds, trajectories, calibration
# ---------------------------------------------------------------------------

def write_xyz(path, points) -> None:
    with open(path, "w") as f:
        for x, y, z in np.asarray(points, dtype=np.float64).tolist():
            f.write(f"{x!r} {y!r} {z!r}\n")


def read_xyz(path) -> np.ndarray:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UnreadableFile(path, str(exc)) from exc
    rows = [line.split() for line in text.splitlines() if line.strip() and not line.startswith("#")]
    try:
        pts = np.array([[float(v) for v in r[:3]] for r in rows], dtype=np.float64)
    except (ValueError, IndexError) as exc:
        raise UnreadableFile(path, "malformed xyz line") from exc
    return pts.reshape(-1, 3)


def format_timestamp(t: float) -> str:
    return f"{t:017.6f}"


def write_tum(path, timestamps, poses) -> None:
    with open(path, "w") as f:
        for ts, pose in zip(timestamps, poses):
            t = pose.translation
            w, x, y, z = pose.rotation
            f.write(f"{ts:.6f} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} {x:.9f} {y:.9f} {z:.9f} {w:.9f}\n")


def read_tum(path):
    """Returns (timestamps array, list of PoseSE3)."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UnreadableFile(path, str(exc)) from exc
    stamps, poses = [], []
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = [float(v) for v in line.replace(",", " ").split()]
        if len(vals) != 8:
            raise UnreadableFile(path, f"expected 8 values per line, got {len(vals)}")
        ts, tx, ty, tz, qx, qy, qz, qw = vals
        stamps.append(ts)
        poses.append(PoseSE3([qw, qx, qy, qz], [tx, ty, tz]))
    return np.array(stamps), poses


def write_calib(path, K, T_cam_lidar: PoseSE3) -> None:
    K = np.asarray(K, dtype=np.float64).reshape(9)
    t = T_cam_lidar.translation
    w, x, y, z = T_cam_lidar.rotation
    vals = list(K) + [t[0], t[1], t[2], x, y, z, w]
    Path(path).write_text(" ".join(repr(float(v)) for v in vals) + "\n")


def read_calib(path):
    """Returns (3x3 K, PoseSE3 lidar->camera)."""
    if not os.path.exists(path):
        raise MissingCalibration(f"calibration file not found: {path}")
    try:
        vals = [float(v) for v in Path(path).read_text().split()]
    except ValueError as exc:
        raise UnreadableFile(path, "non-numeric calibration") from exc
    if len(vals) != 16:
        raise UnreadableFile(path, f"expected 16 numbers, got {len(vals)}")
    K = np.array(vals[:9]).reshape(3, 3)
    tx, ty, tz, qx, qy, qz, qw = vals[9:]
    return K, PoseSE3([qw, qx, qy, qz], [tx, ty, tz])


# ---------------------------------------------------------------------------
# PLY (3DGS field conventions)
# ---------------------------------------------------------------------------

_PLY_FIELDS = (
    [("x", "f4"), ("y", "f4"), ("z", "f4"), ("nx", "f4"), ("ny", "f4"), ("nz", "f4")]
    + [(f"f_dc_{i}", "f4") for i in range(3)]
    + [("opacity", "f4")]
    + [(f"scale_{i}", "f4") for i in range(3)]
    + [(f"rot_{i}", "f4") for i in range(4)]
    + [("reliable", "u1"), ("sky", "u1"), ("birth_frame", "i4")]
)
_PLY_TYPES = {"f4": "float", "f8": "double", "u1": "uchar", "i4": "int", "u4": "uint", "i2": "short", "u2": "ushort", "i1": "char"}
_PLY_TYPES_INV = {v: k for k, v in _PLY_TYPES.items()}
_PLY_TYPES_INV.update({"float32": "f4", "float64": "f8", "uint8": "u1", "int32": "i4"})


def _logit(p):
    p = np.clip(p, 1e-7, 1 - 1e-7)
    return np.log(p / (1 - p))


def write_ply(path, arrays: dict) -> None:
    """Write map arrays (means, quats, log_scales, opacity, colors, reliable, sky,
    birth_frame, normal_hint) as a binary little-endian PLY."""
    n = len(arrays["means"])
    dtype = np.dtype([(name, "<" + t if t != "u1" else t) for name, t in _PLY_FIELDS])
    rec = np.zeros(n, dtype=dtype)
    for i, c in enumerate("xyz"):
        rec[c] = arrays["means"][:, i]
    for i, c in enumerate(("nx", "ny", "nz")):
        rec[c] = arrays["normal_hint"][:, i]
    for i in range(3):
        rec[f"f_dc_{i}"] = (arrays["colors"][:, i] - 0.5) / SH_C0
        rec[f"scale_{i}"] = arrays["log_scales"][:, i]
    for i in range(4):
        rec[f"rot_{i}"] = arrays["quats"][:, i]
    rec["opacity"] = _logit(arrays["opacity"])
    rec["reliable"] = arrays["reliable"].astype(np.uint8)
    rec["sky"] = arrays["sky"].astype(np.uint8)
    rec["birth_frame"] = arrays["birth_frame"]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {_PLY_TYPES[t]} {name}" for name, t in _PLY_FIELDS]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


def read_ply(path) -> dict:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise UnreadableFile(path, str(exc)) from exc
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise UnreadableFile(path, "not a PLY file")
    header = raw[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise UnreadableFile(path, "only binary_little_endian PLY is supported")
    n = 0
    fields = []
    in_vertex = False
    for line in header:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
            in_vertex = True
        elif parts and parts[0] == "element":
            in_vertex = False
        elif parts and parts[0] == "property" and in_vertex:
            fields.append((parts[2], "<" + _PLY_TYPES_INV[parts[1]]))
    rec = np.frombuffer(raw, dtype=np.dtype(fields), count=n, offset=end + len(b"end_header\n"))
    names = rec.dtype.names

    def get(name, default):
        return rec[name].astype(np.float64) if name in names else np.full(n, default, dtype=np.float64)

    out = {
        "means": np.stack([get(c, 0.0) for c in "xyz"], axis=1),
        "normal_hint": np.stack([get(c, 0.0) for c in ("nx", "ny", "nz")], axis=1),
        "colors": np.clip(0.5 + SH_C0 * np.stack([get(f"f_dc_{i}", 0.0) for i in range(3)], axis=1), 0, 1),
        "log_scales": np.stack([get(f"scale_{i}", 0.0) for i in range(3)], axis=1),
        "quats": np.stack([get(f"rot_{i}", 1.0 if i == 0 else 0.0) for i in range(4)], axis=1),
        "opacity": 1.0 / (1.0 + np.exp(-get("opacity", 0.0))),
        "reliable": get("reliable", 1).astype(bool),
        "sky": get("sky", 0).astype(bool),
        "birth_frame": get("birth_frame", 0).astype(np.int64),
    }
    return out
