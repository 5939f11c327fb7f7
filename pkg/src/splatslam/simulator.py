"""Synthetic scenes, trajectories and sensors.

Scenes are flat-shaded rectangles, boxes and spheres (optionally with a world
aligned checker texture) or a set of Gaussian primitives. LiDAR returns are
exact ray/surface intersections plus optional Gaussian range noise; camera
images are per-pixel ray casts with optional supersampling, or renderer
output for Gaussian scenes.
"""
from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import CameraModel, PoseSE3, default_extrinsic, quat_to_rotmat, so3_exp
from .fileio import format_timestamp, write_calib, write_ppm, write_tum, write_xyz
from .sensor import PointCloud

log = logging.getLogger(__name__)

BACKGROUND = (0.53, 0.81, 0.92)
_CHECKER_OFFSET = math.sqrt(2.0) / 7.0     # keeps axis-aligned faces off checker seams
_EPS = 1e-9


class SpecError(ValueError):
    """Bad scene description; the message names the field and, when known, the line."""


# ---------------------------------------------------------------------------
# surfaces
# ---------------------------------------------------------------------------

@dataclass
class Surface:
    color: np.ndarray
    checker: Optional[float] = None
    checker_color: Optional[np.ndarray] = None

    def shade(self, pts):
        c = np.broadcast_to(self.color, pts.shape).copy()
        if self.checker:
            cell = np.floor(pts / self.checker + _CHECKER_OFFSET).astype(np.int64)
            odd = (cell.sum(axis=1) % 2) == 1
            c[odd] = self.checker_color
        return c


@dataclass
class Rect(Surface):
    """Finite rectangle: ``center + a*u + b*v`` with ``|a| <= half[0]``, ``|b| <= half[1]``."""

    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    u_axis: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    half: np.ndarray = field(default_factory=lambda: np.ones(2))

    def __post_init__(self):
        self.normal = _unit(self.normal)
        u = np.asarray(self.u_axis, dtype=np.float64)
        u = u - self.normal * (u @ self.normal)
        self.u_axis = _unit(u)
        self.v_axis = np.cross(self.normal, self.u_axis)
        self.center = np.asarray(self.center, dtype=np.float64)
        self.half = np.asarray(self.half, dtype=np.float64)

    def intersect(self, o, d):
        denom = d @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.center - o) @ self.normal) / denom
        t = np.where(np.abs(denom) > 1e-15, t, np.inf)
        p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
        rel = p - self.center
        inside = (np.abs(rel @ self.u_axis) <= self.half[0]) & (np.abs(rel @ self.v_axis) <= self.half[1])
        t = np.where(inside & (t > _EPS), t, np.inf)
        return t, np.broadcast_to(self.normal, d.shape)


@dataclass
class Sphere(Surface):
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radius: float = 1.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)

    def intersect(self, o, d):
        oc = o - self.center
        b = np.sum(oc * d, axis=1)
        c = np.sum(oc * oc, axis=1) - self.radius**2
        disc = b * b - c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        t = np.where(t0 > _EPS, t0, np.where(t1 > _EPS, t1, np.inf))
        t = np.where(ok, t, np.inf)
        p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
        return t, (p - self.center) / self.radius


def box_faces(center, size, yaw_deg=0.0, color=(0.5, 0.5, 0.5), checker=None, checker_color=None) -> list:
    """Six rectangles of an axis-aligned (up to yaw) box."""
    center = np.asarray(center, dtype=np.float64)
    h = 0.5 * np.asarray(size, dtype=np.float64)
    R = so3_exp(np.array([0.0, 0.0, math.radians(yaw_deg)]))
    ex, ey, ez = R[:, 0], R[:, 1], R[:, 2]
    kw = dict(color=np.asarray(color, dtype=np.float64), checker=checker,
              checker_color=None if checker_color is None else np.asarray(checker_color, dtype=np.float64))
    faces = []
    for n, u, hn, hu, hv in ((ex, ey, h[0], h[1], h[2]), (ey, ex, h[1], h[0], h[2]), (ez, ex, h[2], h[0], h[1])):
        for s in (1.0, -1.0):
            faces.append(Rect(center=center + s * hn * n, normal=s * n, u_axis=u, half=np.array([hu, hv]), **kw))
    return faces


def _unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


@dataclass
class SceneSpec:
    surfaces: list = field(default_factory=list)
    gaussians: object = None              # anything the renderer accepts as a map
    extent: float = 10.0
    seed: int = 0
    background: np.ndarray = field(default_factory=lambda: np.array(BACKGROUND))

    def __post_init__(self):
        if not self.extent > 0:
            raise SpecError("extent must be positive")
        self.background = np.asarray(self.background, dtype=np.float64)

    def is_empty(self) -> bool:
        return not self.surfaces and (self.gaussians is None or len(self.gaussians.means) == 0)


def cast(scene: SceneSpec, origins, dirs):
    """First hits: (t, normal, color); misses have t = inf and background color."""
    dirs = np.asarray(dirs, dtype=np.float64)
    o = np.broadcast_to(np.asarray(origins, dtype=np.float64), dirs.shape)
    n_rays = len(dirs)
    best = np.full(n_rays, np.inf)
    normal = np.zeros((n_rays, 3))
    owner = np.full(n_rays, -1)
    for k, s in enumerate(scene.surfaces):
        t, nrm = s.intersect(o, dirs)
        closer = t < best
        best[closer] = t[closer]
        normal[closer] = nrm[closer]
        owner[closer] = k
    if scene.gaussians is not None and len(scene.gaussians.means):
        t, nrm = _intersect_gaussians(scene.gaussians, o, dirs)
        closer = t < best
        best[closer] = t[closer]
        normal[closer] = nrm[closer]
        owner[closer] = len(scene.surfaces)
    color = np.broadcast_to(scene.background, (n_rays, 3)).copy()
    hit = np.isfinite(best)
    pts = o + np.where(hit, best, 0.0)[:, None] * dirs
    for k, s in enumerate(scene.surfaces):
        m = owner == k
        if m.any():
            color[m] = s.shade(pts[m])
    # face normals toward the ray origin
    flip = np.sum(normal * dirs, axis=1) > 0
    normal[flip] *= -1
    return best, normal, color


def _intersect_gaussians(g, o, d):
    """Ray hits with each primitive's one-sigma ellipsoid."""
    R = quat_to_rotmat(g.quats)
    s = np.exp(g.log_scales)
    best = np.full(len(d), np.inf)
    normal = np.zeros((len(d), 3))
    for i in range(len(g.means)):
        if getattr(g, "sky", None) is not None and g.sky[i]:
            continue
        # ellipsoid frame, unit sphere
        oc = ((o - g.means[i]) @ R[i]) / s[i]
        dc = (d @ R[i]) / s[i]
        a = np.sum(dc * dc, axis=1)
        b = np.sum(oc * dc, axis=1)
        c = np.sum(oc * oc, axis=1) - 1.0
        disc = b * b - a * c
        ok = disc >= 0
        t = (-b - np.sqrt(np.where(ok, disc, 0.0))) / a
        t = np.where(ok & (t > _EPS), t, np.inf)
        closer = t < best
        if closer.any():
            best[closer] = t[closer]
            p = oc[closer] + t[closer, None] * dc[closer]
            n = (p / s[i]) @ R[i].T
            normal[closer] = n / np.linalg.norm(n, axis=1, keepdims=True)
    return best, normal


# ---------------------------------------------------------------------------
# sensors
# ---------------------------------------------------------------------------

@dataclass
class LidarSpec:
    pattern: str = "rosette"
    points: int = 2000
    hfov_deg: float = 81.0
    vfov_deg: float = 25.0
    noise: float = 0.0
    max_range: float = 100.0
    seed: int = 0

    def __post_init__(self):
        if self.pattern not in ("grid", "rosette"):
            raise SpecError(f"unknown LiDAR pattern {self.pattern!r} (grid or rosette)")
        if self.points < 1:
            raise SpecError("LiDAR needs at least one ray")


def _halton(index, base):
    out = np.zeros(len(index))
    f = 1.0
    i = index.astype(np.int64).copy()
    while np.any(i > 0):
        f /= base
        out += f * (i % base)
        i //= base
    return out


def lidar_directions(spec: LidarSpec, scan_index: int = 0) -> np.ndarray:
    """Unit ray directions in the sensor frame (x forward, z up)."""
    hf = math.radians(spec.hfov_deg) / 2
    vf = math.radians(spec.vfov_deg) / 2
    if spec.pattern == "grid":
        nv = max(1, round(math.sqrt(spec.points * spec.vfov_deg / spec.hfov_deg)))
        nh = max(1, spec.points // nv)
        az = np.linspace(-hf, hf, nh)
        el = np.linspace(-vf, vf, nv)
        A, E = np.meshgrid(az, el)
        az, el = A.ravel(), E.ravel()
    else:
        # non-repeating quasi-random coverage that moves on every scan
        k = np.arange(spec.points) + 1 + scan_index * spec.points
        az = (2 * _halton(k, 2) - 1) * hf
        el = (2 * _halton(k, 3) - 1) * vf
    return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=1)


def simulate_lidar(scene: SceneSpec, pose: PoseSE3, spec: Optional[LidarSpec] = None, scan_index: int = 0,
                   timestamp: float = 0.0) -> PointCloud:
    """Sensor-frame returns with ground-truth normals attached (for oracles only)."""
    spec = spec or LidarSpec()
    if scene.is_empty():
        raise SpecError("scene has no surfaces")
    d_l = lidar_directions(spec, scan_index)
    d_w = pose.rotate(d_l)
    t, n_w, _ = cast(scene, pose.translation, d_w)
    hit = np.isfinite(t) & (t <= spec.max_range)
    r = t[hit]
    if spec.noise > 0:
        rng = np.random.default_rng([spec.seed, scan_index])
        r = r + rng.normal(0.0, spec.noise, len(t))[hit]
    pts = d_l[hit] * r[:, None]
    normals = pose.inverse().rotate(n_w[hit])
    return PointCloud(pts, normals, None, timestamp)


def simulate_camera(scene: SceneSpec, pose: PoseSE3, cam: CameraModel, supersample: int = 1) -> np.ndarray:
    """RGB image in [0,1] seen from the rig pose ``pose``."""
    if scene.gaussians is not None and not scene.surfaces:
        from .renderer import render
        return render(scene.gaussians, pose, cam).color
    s = max(1, int(supersample))
    offs = (np.arange(s) + 0.5) / s - 0.5
    cols, rows = np.meshgrid(np.arange(cam.width, dtype=np.float64), np.arange(cam.height, dtype=np.float64))
    acc = np.zeros((cam.height * cam.width, 3))
    cam_pose = cam.camera_pose(pose)
    for dy in offs:
        for dx in offs:
            x = (cols.ravel() + dx - cam.cx) / cam.fx
            y = (rows.ravel() + dy - cam.cy) / cam.fy
            d = np.stack([x, y, np.ones_like(x)], axis=1)
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            _, _, c = cast(scene, cam_pose.translation, cam_pose.rotate(d))
            acc += c
    return (acc / (s * s)).reshape(cam.height, cam.width, 3)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

@dataclass
class TrajectorySpec:
    """Parametric rig path.

    ``kind`` is ``line`` (start to end), ``arc`` (around ``center`` from
    ``start`` by ``angle_deg``), ``loop`` (full circle) or ``waypoints``.
    Heading follows the path tangent; ``lateral`` and ``yaw_deg`` add small
    sinusoidal wiggles so every axis gets excited.
    """

    kind: str = "line"
    frames: int = 50
    start: np.ndarray = field(default_factory=lambda: np.zeros(3))
    end: np.ndarray = field(default_factory=lambda: np.array([5.0, 0.0, 0.0]))
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angle_deg: float = 90.0
    waypoints: Optional[list] = None
    lateral: float = 0.0
    yaw_deg: float = 0.0
    pitch_deg: float = 0.0
    dt: float = 0.1
    t0: float = 1000.0

    def __post_init__(self):
        if self.frames < 2:
            raise SpecError("trajectory needs at least 2 frames")
        if self.kind not in ("line", "arc", "loop", "waypoints"):
            raise SpecError(f"unknown trajectory kind {self.kind!r}")
        self.start = np.asarray(self.start, dtype=np.float64)
        self.end = np.asarray(self.end, dtype=np.float64)
        self.center = np.asarray(self.center, dtype=np.float64)
        if self.kind == "waypoints" and (not self.waypoints or len(self.waypoints) < 2):
            raise SpecError("waypoints trajectory needs at least 2 waypoints")


def trajectory_poses(spec: TrajectorySpec):
    """(timestamps, poses) of the rig."""
    s = np.linspace(0.0, 1.0, spec.frames)
    if spec.kind == "line":
        pos = spec.start + s[:, None] * (spec.end - spec.start)
        tan = np.tile(_unit(spec.end - spec.start), (len(s), 1))
    elif spec.kind in ("arc", "loop"):
        ang = math.radians(360.0 if spec.kind == "loop" else spec.angle_deg)
        r0 = spec.start - spec.center
        radius = np.linalg.norm(r0[:2])
        phi0 = math.atan2(r0[1], r0[0])
        phi = phi0 + s * ang
        pos = np.stack([spec.center[0] + radius * np.cos(phi), spec.center[1] + radius * np.sin(phi),
                        np.full(len(s), spec.start[2])], axis=1)
        sign = 1.0 if ang >= 0 else -1.0
        tan = sign * np.stack([-np.sin(phi), np.cos(phi), np.zeros(len(s))], axis=1)
    else:
        wp = np.asarray(spec.waypoints, dtype=np.float64)
        seg = np.linalg.norm(np.diff(wp, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)]) / seg.sum()
        pos = np.stack([np.interp(s, cum, wp[:, k]) for k in range(3)], axis=1)
        k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
        tan = (wp[k + 1] - wp[k]) / seg[k, None]
    wig = np.sin(2 * np.pi * s * 1.5)
    left = np.stack([-tan[:, 1], tan[:, 0], np.zeros(len(s))], axis=1)
    pos = pos + spec.lateral * wig[:, None] * left
    poses = []
    for p, tv, w, c in zip(pos, tan, wig, np.cos(2 * np.pi * s)):
        yaw = math.atan2(tv[1], tv[0]) + math.radians(spec.yaw_deg) * w
        pitch = math.radians(spec.pitch_deg) * c
        R = so3_exp(np.array([0.0, 0.0, yaw])) @ so3_exp(np.array([0.0, pitch, 0.0]))
        poses.append(PoseSE3.from_rt(R, p))
    stamps = spec.t0 + spec.dt * np.arange(spec.frames)
    return stamps, poses


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------

@dataclass
class SimulationSpec:
    scene: SceneSpec
    trajectory: TrajectorySpec
    camera: CameraModel
    lidar: LidarSpec
    supersample: int = 2


def generate_sequence(scene: SceneSpec, traj: TrajectorySpec, cam: CameraModel, out_dir,
                      lidar: Optional[LidarSpec] = None, supersample: int = 2) -> Path:
    """Write calib.txt, images/, scans/ and gt_trajectory.txt under ``out_dir``."""
    lidar = lidar or LidarSpec(seed=scene.seed)
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "scans").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    write_calib(out / "calib.txt", cam.K, cam.T_cam_lidar)
    stamps, poses = trajectory_poses(traj)
    for i, (t, pose) in enumerate(zip(stamps, poses)):
        name = format_timestamp(t)
        img = simulate_camera(scene, pose, cam, supersample)
        write_ppm(out / "images" / f"{name}.ppm", img)
        cloud = simulate_lidar(scene, pose, lidar, i, t)
        write_xyz(out / "scans" / f"{name}.xyz", cloud.points)
    write_tum(out / "gt_trajectory.txt", stamps, poses)
    return out


# ---------------------------------------------------------------------------
# JSON specs
# ---------------------------------------------------------------------------

SCENE_DIR = Path(__file__).parent / "scenes"


def bundled_scene(name: str) -> Path:
    path = SCENE_DIR / (name.replace("-", "_") + ".json")
    if not path.exists():
        raise FileNotFoundError(f"no bundled scene named {name!r} ({path})")
    return path


class _Fields:
    """Typed access to a JSON object with field-path and line diagnostics."""

    def __init__(self, obj, path, text):
        if not isinstance(obj, dict):
            raise SpecError(f"{_where(text, path)}field '{path}': expected an object")
        self.obj, self.path, self.text = obj, path, text

    def _err(self, key, msg):
        full = f"{self.path}.{key}" if self.path else key
        return SpecError(f"{_where(self.text, key)}field '{full}': {msg}")

    def get(self, key, default=None, required=False):
        if key not in self.obj:
            if required:
                raise self._err(key, "is required")
            return default
        return self.obj[key]

    def num(self, key, default=None, required=False, positive=False, integer=False):
        v = self.get(key, default, required)
        if v is None:
            return v
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise self._err(key, f"expected a number, got {v!r}")
        if integer and int(v) != v:
            raise self._err(key, f"expected an integer, got {v!r}")
        if positive and not v > 0:
            raise self._err(key, f"must be positive, got {v!r}")
        return int(v) if integer else float(v)

    def vec(self, key, n, default=None, required=False):
        v = self.get(key, default, required)
        if v is None:
            return v
        if not isinstance(v, (list, tuple)) or len(v) != n or not all(
                isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
            raise self._err(key, f"expected a list of {n} numbers, got {v!r}")
        return np.asarray(v, dtype=np.float64)

    def sub(self, key):
        full = f"{self.path}.{key}" if self.path else key
        return _Fields(self.get(key, {}), full, self.text)


def _where(text, key):
    last = key.split(".")[-1].split("[")[0]
    m = re.search(r'"%s"\s*:' % re.escape(last), text or "")
    if not m:
        return ""
    return f"line {text.count(chr(10), 0, m.start()) + 1}: "


def _surface(f: _Fields):
    kind = f.get("type", required=True)
    color = f.vec("color", 3, default=[0.6, 0.6, 0.6])
    checker = f.num("checker", positive=True)
    cc = f.vec("checker_color", 3, default=list(1.0 - color))
    if kind == "plane":
        return [Rect(color=color, checker=checker, checker_color=cc, center=f.vec("center", 3, required=True),
                     normal=f.vec("normal", 3, required=True), u_axis=f.vec("u_axis", 3, default=[1.0, 0, 0]),
                     half=0.5 * f.vec("size", 2, required=True))]
    if kind == "box":
        return box_faces(f.vec("center", 3, required=True), f.vec("size", 3, required=True),
                         f.num("yaw_deg", 0.0), color, checker, cc)
    if kind == "sphere":
        return [Sphere(color=color, checker=checker, checker_color=cc, center=f.vec("center", 3, required=True),
                       radius=f.num("radius", required=True, positive=True))]
    raise f._err("type", f"unknown surface type {kind!r} (plane, box or sphere)")


def parse_spec(text: str, seed: Optional[int] = None) -> SimulationSpec:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(f"line {exc.lineno}: invalid JSON: {exc.msg}") from exc
    root = _Fields(raw, "", text)
    seed = root.num("seed", 0, integer=True) if seed is None else int(seed)
    surfaces = []
    items = root.get("surfaces", [])
    if not isinstance(items, list) or not items:
        raise root._err("surfaces", "expected a non-empty list")
    for i, item in enumerate(items):
        surfaces.append(_surface(_Fields(item, f"surfaces[{i}]", text)))
    scene = SceneSpec([s for group in surfaces for s in group], None,
                      root.num("extent", 10.0, positive=True), seed,
                      root.vec("background", 3, default=list(BACKGROUND)))
    t = root.sub("trajectory")
    kind = t.get("type", "line")
    wps = t.get("waypoints")
    traj = TrajectorySpec(kind=kind, frames=t.num("frames", 50, integer=True),
                          start=t.vec("start", 3, default=[0.0, 0, 0]), end=t.vec("end", 3, default=[5.0, 0, 0]),
                          center=t.vec("center", 3, default=[0.0, 0, 0]), angle_deg=t.num("angle_deg", 90.0),
                          waypoints=wps, lateral=t.num("lateral", 0.0), yaw_deg=t.num("yaw_deg", 0.0),
                          pitch_deg=t.num("pitch_deg", 0.0), dt=t.num("dt", 0.1, positive=True),
                          t0=t.num("t0", 1000.0))
    c = root.sub("camera")
    w = c.num("width", 80, integer=True, positive=True)
    h = c.num("height", 60, integer=True, positive=True)
    fx = c.num("fx", 40.0, positive=True)
    cam = CameraModel(fx, c.num("fy", fx, positive=True), c.num("cx", (w - 1) / 2), c.num("cy", (h - 1) / 2),
                      w, h, default_extrinsic(c.vec("offset", 3, default=[0.0, 0, 0])))
    li = root.sub("lidar")
    lidar = LidarSpec(pattern=li.get("pattern", "rosette"), points=li.num("points", 2000, integer=True),
                      hfov_deg=li.num("hfov_deg", 81.0, positive=True), vfov_deg=li.num("vfov_deg", 25.0, positive=True),
                      noise=li.num("noise", 0.0), max_range=li.num("max_range", 100.0, positive=True), seed=seed)
    if lidar.noise < 0:
        raise li._err("noise", "must be >= 0")
    return SimulationSpec(scene, traj, cam, lidar, c.num("supersample", 2, integer=True, positive=True))


def load_spec(path, seed: Optional[int] = None) -> SimulationSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise SpecError(f"{path}: cannot read spec: {exc}") from exc
    try:
        return parse_spec(text, seed)
    except SpecError as exc:
        raise SpecError(f"{path}: {exc}") from None


def generate_from_spec(spec: SimulationSpec, out_dir) -> Path:
    return generate_sequence(spec.scene, spec.trajectory, spec.camera, out_dir, spec.lidar, spec.supersample)
