"""The Gaussian map and the operations that grow, reshape and shrink it."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
from scipy.spatial import cKDTree

from .core import (LOG_SCALE_FLOOR, CameraModel, GaussianPrimitive, PoseSE3, covariances,
                   quat_to_rotmat, rotmat_to_quat, smallest_axes)
from .fileio import read_ply, write_ply

SKY_COLOR = np.array([0.53, 0.81, 0.92])

_ARRAY_FIELDS = ("means", "quats", "log_scales", "opacity", "colors", "reliable", "sky",
                 "birth_frame", "normal_hint", "rounds", "split_pending")


class NoReliableAnchor(RuntimeError):
    pass


@dataclass(frozen=True)
class DensityQuery:
    point: np.ndarray
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("density radius must be positive")
        object.__setattr__(self, "point", np.asarray(self.point, dtype=np.float64).reshape(3))


class GaussianMap:
    """Structure-of-arrays store of Gaussian primitives.

    ``events`` records the frame index of every keyframe insertion; the
    tracking submap covers the last ``window_size`` of them.
    """

    def __init__(self, window_size: int = 10):
        self.window_size = window_size
        self.means = np.zeros((0, 3))
        self.quats = np.zeros((0, 4))
        self.log_scales = np.zeros((0, 3))
        self.opacity = np.zeros(0)
        self.colors = np.zeros((0, 3))
        self.reliable = np.zeros(0, dtype=bool)
        self.sky = np.zeros(0, dtype=bool)
        self.birth_frame = np.zeros(0, dtype=np.int64)
        self.normal_hint = np.zeros((0, 3))
        self.rounds = np.zeros(0, dtype=np.int64)
        self.split_pending = np.zeros(0, dtype=bool)
        self.events: list[int] = []
        self._tree: Optional[cKDTree] = None

    # -- container protocol -------------------------------------------------
    def __len__(self):
        return len(self.means)

    def __getitem__(self, i) -> GaussianPrimitive:
        return GaussianPrimitive(
            mean=self.means[i], rotation=self.quats[i], log_scales=self.log_scales[i],
            opacity=self.opacity[i], color=self.colors[i], reliable=bool(self.reliable[i]),
            birth_frame=int(self.birth_frame[i]), normal_hint=self.normal_hint[i], sky=bool(self.sky[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def copy(self) -> "GaussianMap":
        other = GaussianMap(self.window_size)
        for name in _ARRAY_FIELDS:
            setattr(other, name, getattr(self, name).copy())
        other.events = list(self.events)
        return other

    @property
    def window(self) -> list[int]:
        return self.events[-self.window_size:]

    def invalidate(self):
        self._tree = None

    # -- mutation -------------------------------------------------------------
    def add_arrays(self, means, quats, log_scales, opacity, colors, reliable=True, sky=False,
                   birth_frame=0, normal_hint=None) -> np.ndarray:
        n = len(means)
        means = np.asarray(means, dtype=np.float64).reshape(n, 3)
        quats = np.asarray(quats, dtype=np.float64).reshape(n, 4)
        quats = quats / np.linalg.norm(quats, axis=1, keepdims=True)
        if normal_hint is None:
            normal_hint = np.zeros((n, 3))
        new = {
            "means": means,
            "quats": quats,
            "log_scales": np.maximum(np.asarray(log_scales, dtype=np.float64).reshape(n, 3), LOG_SCALE_FLOOR),
            "opacity": np.broadcast_to(np.asarray(opacity, dtype=np.float64), (n,)).copy(),
            "colors": np.broadcast_to(np.asarray(colors, dtype=np.float64), (n, 3)).copy(),
            "reliable": np.broadcast_to(np.asarray(reliable, dtype=bool), (n,)).copy(),
            "sky": np.broadcast_to(np.asarray(sky, dtype=bool), (n,)).copy(),
            "birth_frame": np.broadcast_to(np.asarray(birth_frame, dtype=np.int64), (n,)).copy(),
            "normal_hint": np.broadcast_to(np.asarray(normal_hint, dtype=np.float64), (n, 3)).copy(),
            "rounds": np.zeros(n, dtype=np.int64),
            "split_pending": np.zeros(n, dtype=bool),
        }
        start = len(self)
        for name, arr in new.items():
            setattr(self, name, np.concatenate([getattr(self, name), arr]))
        self.invalidate()
        return np.arange(start, start + n)

    def add(self, prims: Iterable[GaussianPrimitive]) -> np.ndarray:
        prims = list(prims)
        if not prims:
            return np.zeros(0, dtype=np.int64)
        return self.add_arrays(
            np.array([p.mean for p in prims]), np.array([p.rotation for p in prims]),
            np.array([p.log_scales for p in prims]), np.array([p.opacity for p in prims]),
            np.array([p.color for p in prims]), np.array([p.reliable for p in prims]),
            np.array([p.sky for p in prims]), np.array([p.birth_frame for p in prims]),
            np.array([p.normal_hint for p in prims]))

    def remove(self, mask) -> int:
        mask = np.asarray(mask, dtype=bool)
        keep = ~mask
        for name in _ARRAY_FIELDS:
            setattr(self, name, getattr(self, name)[keep])
        self.invalidate()
        return int(mask.sum())

    def set_params(self, idx, means=None, quats=None, log_scales=None, opacity=None, colors=None):
        if means is not None:
            self.means[idx] = means
            self.invalidate()
        if quats is not None:
            q = np.asarray(quats, dtype=np.float64)
            self.quats[idx] = q / np.linalg.norm(q, axis=-1, keepdims=True)
        if log_scales is not None:
            self.log_scales[idx] = np.maximum(log_scales, LOG_SCALE_FLOOR)
        if opacity is not None:
            self.opacity[idx] = opacity
        if colors is not None:
            self.colors[idx] = colors

    # -- derived quantities --------------------------------------------------
    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            self._tree = cKDTree(self.means if len(self) else np.zeros((0, 3)))
        return self._tree

    def normals(self, idx=slice(None)) -> np.ndarray:
        return smallest_axes(self.quats[idx], self.log_scales[idx], self.normal_hint[idx])

    def covariances(self, idx=slice(None)) -> np.ndarray:
        return covariances(self.quats[idx], self.log_scales[idx])

    def nearest(self, points, k: int = 1):
        return self.tree.query(np.asarray(points, dtype=np.float64), k=k)

    def to_arrays(self) -> dict:
        return {name: getattr(self, name) for name in _ARRAY_FIELDS}

    def save_ply(self, path) -> None:
        write_ply(path, self.to_arrays())

    @classmethod
    def load_ply(cls, path, window_size: int = 10) -> "GaussianMap":
        data = read_ply(path)
        m = cls(window_size)
        m.add_arrays(data["means"], data["quats"], data["log_scales"], data["opacity"], data["colors"],
                     data["reliable"], data["sky"], data["birth_frame"], data["normal_hint"])
        m.events = sorted(set(int(b) for b in m.birth_frame[~m.sky]))
        return m

    def check_invariants(self) -> None:
        assert np.all(np.isfinite(self.means)) and np.all(np.isfinite(self.log_scales))
        assert np.all(np.isfinite(self.quats)) and np.all(np.isfinite(self.colors))
        assert np.all(self.log_scales >= LOG_SCALE_FLOOR - 1e-12)
        assert np.allclose(np.linalg.norm(self.quats, axis=1), 1.0, atol=1e-9)
        assert np.all((self.opacity >= 0) & (self.opacity <= 1))


# ---------------------------------------------------------------------------
# submap
# ---------------------------------------------------------------------------

def submap_mask(gmap: GaussianMap, window: Optional[int] = None) -> np.ndarray:
    events = gmap.events[-(window or gmap.window_size):]
    return np.isin(gmap.birth_frame, events)


def submap(gmap: GaussianMap, current_frame: Optional[int] = None) -> np.ndarray:
    """Indices of primitives born in the last ``window_size`` insertion events."""
    mask = submap_mask(gmap)
    if current_frame is not None:
        mask &= gmap.birth_frame <= current_frame
    return np.flatnonzero(mask)


# ---------------------------------------------------------------------------
# density and weighting
# ---------------------------------------------------------------------------

def reconstruct_covariance(g: GaussianPrimitive) -> np.ndarray:
    """Normal-scaled covariance: eigenvalue 1 along the normal, sigma_i/sigma_along elsewhere."""
    R = quat_to_rotmat(g.rotation)
    s = g.scales
    order = np.argsort(s, kind="stable")
    D = R[:, order]
    ratios = s[order] / s[order[0]]
    ratios[0] = 1.0
    return (D * ratios) @ D.T


def _density_terms(diff, quats, log_scales, mode):
    """Quadratic forms (x - mu)^T Sigma'^-1 (x - mu) for matched rows."""
    R = quat_to_rotmat(quats)
    s = np.exp(log_scales)
    proj = np.einsum("nij,ni->nj", R, diff)          # coordinates along each axis
    k = np.argmin(s, axis=1)
    s_along = np.take_along_axis(s, k[:, None], axis=1)[:, 0]
    if mode == "exact":
        w = s_along[:, None] / s
        return np.sum(w * proj**2, axis=1)
    if mode == "fast":
        along = np.take_along_axis(proj, k[:, None], axis=1)[:, 0]
        coef = np.prod(s, axis=1) / s_along**3          # sigma_perp1 * sigma_perp2 / sigma_along^2
        return coef * along**2
    raise ValueError(f"unknown density mode {mode!r}")


def density_at(gmap: GaussianMap, points, radius: float, mode: str = "exact", idx=None) -> np.ndarray:
    """rho(x) for many query points; ``idx`` restricts the contributing primitives."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if idx is None:
        idx = np.arange(len(gmap))
    idx = np.asarray(idx)
    out = np.zeros(len(points))
    if len(idx) == 0:
        return out
    tree = cKDTree(gmap.means[idx])
    nb = tree.query_ball_point(points, radius)
    qi = np.repeat(np.arange(len(points)), [len(n) for n in nb])
    gi = idx[np.concatenate([np.asarray(n, dtype=np.int64) for n in nb])] if len(qi) else np.zeros(0, dtype=np.int64)
    if len(gi) == 0:
        return out
    diff = points[qi] - gmap.means[gi]
    q = _density_terms(diff, gmap.quats[gi], gmap.log_scales[gi], mode)
    np.add.at(out, qi, gmap.opacity[gi] * np.exp(-0.5 * q))
    return out


def density(gmap: GaussianMap, q: DensityQuery, mode: str = "exact") -> float:
    return float(density_at(gmap, q.point, q.radius, mode)[0])


def neighborhood_radius(gmap: GaussianMap, idx=None, factor: float = 3.0) -> float:
    """``factor`` times the median nearest-neighbour spacing of the selected means."""
    pts = gmap.means if idx is None else gmap.means[idx]
    if len(pts) < 2:
        return 1.0
    d, _ = cKDTree(pts).query(pts, k=2)
    spacing = float(np.median(d[:, 1]))
    return factor * spacing if spacing > 0 else 1.0


def weights(gmap: GaussianMap, idx=None, radius: Optional[float] = None, mode: str = "exact") -> np.ndarray:
    """W = C * rho evaluated at each selected primitive's mean, over the selection."""
    idx = np.arange(len(gmap)) if idx is None else np.asarray(idx)
    if len(idx) == 0:
        return np.zeros(0)
    if radius is None:
        radius = neighborhood_radius(gmap, idx)
    means = gmap.means[idx]
    normals = gmap.normals(idx)
    pairs = cKDTree(means).query_pairs(radius, output_type="ndarray")
    i = np.concatenate([pairs[:, 0], pairs[:, 1]])
    j = np.concatenate([pairs[:, 1], pairs[:, 0]])
    # density includes the primitive itself; the neighbour normal average does not
    diff = means[i] - means[j]
    q = _density_terms(diff, gmap.quats[idx[j]], gmap.log_scales[idx[j]], mode)
    rho = gmap.opacity[idx].copy()
    np.add.at(rho, i, gmap.opacity[idx[j]] * np.exp(-0.5 * q))
    nj = normals[j]
    sign = np.where(np.sum(nj * normals[i], axis=1) < 0, -1.0, 1.0)
    acc = np.zeros((len(idx), 3))
    np.add.at(acc, i, nj * sign[:, None])
    norm = np.linalg.norm(acc, axis=1)
    has_nb = norm > 0
    consistency = np.ones(len(idx))
    nbar = acc[has_nb] / norm[has_nb, None]
    consistency[has_nb] = np.sum(normals[has_nb] * nbar, axis=1)
    counts = np.bincount(i, minlength=len(idx))
    consistency[(counts > 0) & ~has_nb] = 0.0
    return np.maximum(consistency * rho, 0.0)


def weight(gmap: GaussianMap, index: int, radius: Optional[float] = None, mode: str = "exact") -> float:
    """Weight of one primitive, computed against the whole map."""
    if radius is None:
        radius = neighborhood_radius(gmap)
    w = weights(gmap, None, radius, mode)
    return float(w[index])


# ---------------------------------------------------------------------------
# insertion
# ---------------------------------------------------------------------------

def footprint_scale(depth, fx):
    """Tangential std-dev of a point at ``depth``: one pixel's footprint."""
    return np.asarray(depth, dtype=np.float64) / fx


def bilinear_sample(image, u, v):
    h, w = image.shape[:2]
    u = np.clip(u, 0.0, w - 1.0)
    v = np.clip(v, 0.0, h - 1.0)
    u0 = np.minimum(np.floor(u).astype(np.int64), w - 2) if w > 1 else np.zeros(len(u), dtype=np.int64)
    v0 = np.minimum(np.floor(v).astype(np.int64), h - 2) if h > 1 else np.zeros(len(v), dtype=np.int64)
    du = (u - u0)[:, None]
    dv = (v - v0)[:, None]
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    return ((1 - du) * (1 - dv) * image[v0, u0] + du * (1 - dv) * image[v0, u1]
            + (1 - du) * dv * image[v1, u0] + du * dv * image[v1, u1])


def insert_keyframe_points(gmap: GaussianMap, frame, pose: PoseSE3, cam: CameraModel,
                           ray_stretch: float = 2.0, flatten: float = 0.3, opacity: float = 0.5) -> int:
    """Add one primitive per LiDAR point that lands inside the image.

    Each starts as a flat ellipse in the surface plane: one-pixel footprint
    ``sigma_t`` across, ``ray_stretch * sigma_t`` along the in-plane direction
    of the viewing ray and ``flatten * sigma_t`` along the point's normal, so
    the smallest axis is the LiDAR normal.
    """
    cloud = frame.cloud
    gmap.events.append(int(frame.index))
    if len(cloud) == 0:
        return 0
    pc = cam.T_cam_lidar.apply(cloud.points)
    u, v, z = cam.project(pc)
    col, row = cam.pixel_index(np.nan_to_num(u), np.nan_to_num(v))
    ok = (z > 0) & (col >= 0) & (col < cam.width) & (row >= 0) & (row < cam.height)
    if not ok.any():
        return 0
    u, v, z = u[ok], v[ok], z[ok]
    pts_l = cloud.points[ok]
    mu = pose.apply(pts_l)
    cam_center = cam.camera_pose(pose).translation
    ray = mu - cam_center
    ray /= np.linalg.norm(ray, axis=1, keepdims=True)
    if cloud.normals is not None:
        n = pose.rotate(cloud.normals[ok])
        bad = ~cloud.valid[ok]
        n[bad] = -ray[bad]
    else:
        n = -ray
    # in-plane axis along the ray; any tangent when the ray hits head-on
    a = ray - n * np.sum(ray * n, axis=1, keepdims=True)
    na = np.linalg.norm(a, axis=1)
    head_on = na < 1e-6
    if head_on.any():
        ref = np.where(np.abs(n[head_on, 0:1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
        a[head_on] = np.cross(n[head_on], ref)
        na[head_on] = np.linalg.norm(a[head_on], axis=1)
    a /= na[:, None]
    b = np.cross(n, a)
    R = np.stack([n, a, b], axis=2)
    sigma_t = footprint_scale(z, cam.fx)
    log_scales = np.log(np.stack([flatten * sigma_t, ray_stretch * sigma_t, sigma_t], axis=1))
    colors = bilinear_sample(frame.image, u, v)
    gmap.add_arrays(mu, rotmat_to_quat(R), log_scales, opacity, colors, reliable=True, sky=False,
                    birth_frame=frame.index, normal_hint=n)
    return int(ok.sum())


def seed_color_only(gmap: GaussianMap, frame, pose: PoseSE3, cam: CameraModel, stride: int = 8,
                    opacity: float = 0.5) -> int:
    """Add unreliable primitives at image blocks without any LiDAR return.

    Positions use the median LiDAR depth along each pixel ray; ``cgc_split``
    re-anchors them afterwards.
    """
    if stride <= 0:
        return 0
    d = frame.depth
    if not (d > 0).any():
        return 0
    guess = float(np.median(d[d > 0]))
    cols, rows = [], []
    for r0 in range(0, cam.height, stride):
        for c0 in range(0, cam.width, stride):
            if not (d[r0:r0 + stride, c0:c0 + stride] > 0).any():
                rows.append(min(r0 + stride // 2, cam.height - 1))
                cols.append(min(c0 + stride // 2, cam.width - 1))
    if not cols:
        return 0
    cols = np.array(cols)
    rows = np.array(rows)
    pc = cam.backproject(cols, rows, np.full(len(cols), guess))
    cam_pose = cam.camera_pose(pose)
    mu = cam_pose.apply(pc)
    ray = mu - cam_pose.translation
    ray /= np.linalg.norm(ray, axis=1, keepdims=True)
    s = np.log(footprint_scale(guess, cam.fx) * stride / 2.0)
    gmap.add_arrays(mu, np.tile([1.0, 0, 0, 0], (len(mu), 1)), np.full((len(mu), 3), s), opacity,
                    frame.image[rows, cols], reliable=False, sky=False, birth_frame=frame.index,
                    normal_hint=-ray)
    return len(mu)


# ---------------------------------------------------------------------------
# conditional Gaussian split
# ---------------------------------------------------------------------------

def cgc_split(gmap: GaussianMap, unreliable=None, frame_index: int = 0, seed: int = 0,
              children: int = 0) -> list[GaussianPrimitive]:
    """Re-anchor unreliable primitives on their nearest reliable neighbour.

    Each one's mean is redrawn from N(mu_y, Sigma_y) of the nearest reliable
    primitive y and it takes y's shape; colour and opacity are kept. With
    ``children > 0`` that many extra samples are appended per split.
    """
    if unreliable is None:
        unreliable = np.flatnonzero(~gmap.reliable & ~gmap.sky)
    unreliable = np.asarray(unreliable, dtype=np.int64)
    if len(unreliable) == 0:
        return []
    anchors = np.flatnonzero(gmap.reliable & ~gmap.sky)
    if len(anchors) == 0:
        raise NoReliableAnchor("no reliable primitive to anchor the split")
    _, k = cKDTree(gmap.means[anchors]).query(gmap.means[unreliable])
    y = anchors[k]
    L = np.linalg.cholesky(covariances(gmap.quats[y], gmap.log_scales[y]) + 1e-18 * np.eye(3))
    out = []
    extra = []
    for x, yi, Li in zip(unreliable, y, L):
        rng = np.random.default_rng([seed, frame_index, int(x)])
        z = rng.standard_normal((1 + children, 3))
        samples = gmap.means[yi] + z @ Li.T
        gmap.means[x] = samples[0]
        gmap.quats[x] = gmap.quats[yi]
        gmap.log_scales[x] = gmap.log_scales[yi]
        gmap.normal_hint[x] = gmap.normal_hint[yi]
        gmap.split_pending[x] = True
        out.append(gmap[x])
        for s in samples[1:]:
            extra.append((s, x))
    if extra:
        src = np.array([x for _, x in extra])
        idx = gmap.add_arrays(np.array([s for s, _ in extra]), gmap.quats[src], gmap.log_scales[src],
                              gmap.opacity[src], gmap.colors[src], reliable=False,
                              birth_frame=gmap.birth_frame[src], normal_hint=gmap.normal_hint[src])
        gmap.split_pending[idx] = True
        out.extend(gmap[i] for i in idx)
    gmap.invalidate()
    return out


def promote_survivors(gmap: GaussianMap) -> int:
    """Split primitives that lived through an optimisation round become reliable."""
    m = gmap.split_pending & (gmap.rounds >= 1)
    gmap.reliable[m] = True
    gmap.split_pending[m] = False
    return int(m.sum())


# ---------------------------------------------------------------------------
# skybox and pruning
# ---------------------------------------------------------------------------

def init_skybox(gmap: GaussianMap, n: int = 1000, radius: float = 100.0, center=(0.0, 0.0, 0.0),
                frame_index: int = 0) -> int:
    """Shell of ``n`` sky primitives on the upper (z >= 0) hemisphere."""
    if n <= 0:
        raise ValueError("skybox needs n > 0")
    i = np.arange(n) + 0.5
    z = i / n                                        # uniform in z => uniform area
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i           # golden-angle spiral
    r_xy = np.sqrt(1.0 - z**2)
    dirs = np.stack([r_xy * np.cos(phi), r_xy * np.sin(phi), z], axis=1)
    means = np.asarray(center, dtype=np.float64) + radius * dirs
    # local frame: third axis radial, first two tangential
    ref = np.where(np.abs(dirs[:, 2:3]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
    t1 = np.cross(ref, dirs)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(dirs, t1)
    R = np.stack([t1, t2, dirs], axis=2)
    spacing = radius * np.sqrt(2.0 * np.pi / n)
    log_scales = np.log(np.array([0.6 * spacing, 0.6 * spacing, 0.05 * spacing]))
    gmap.add_arrays(means, rotmat_to_quat(R), np.tile(log_scales, (n, 1)), 0.5, SKY_COLOR,
                    reliable=False, sky=True, birth_frame=frame_index, normal_hint=-dirs)
    return n


def prune(gmap: GaussianMap, opacity_floor: float = 0.05, stale_window: int = 10,
          weight_values: Optional[np.ndarray] = None) -> int:
    """Drop faded primitives that have been through at least one optimisation round.

    Primitives born inside the last ``stale_window`` insertion events whose
    weight exceeds the median weight of that window are kept regardless.
    """
    cand = (gmap.opacity < opacity_floor) & (gmap.rounds >= 1)
    if not cand.any():
        return 0
    active = np.flatnonzero(submap_mask(gmap, stale_window) & ~gmap.sky)
    if len(active):
        w = weights(gmap, active) if weight_values is None else weight_values[active]
        protect = active[w > np.median(w)]
        cand[protect] = False
    return gmap.remove(cand)
