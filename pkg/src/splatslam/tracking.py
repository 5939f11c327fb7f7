"""Front-end: weighted point-to-Gaussian registration and keyframe selection.

Pose updates are right perturbations ``T @ exp(xi)`` with ``xi = (v, omega)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy.spatial import cKDTree

from .core import CameraModel, PoseSE3
from .gaussian_map import GaussianMap, submap_mask, weights
from .sensor import Frame, PointCloud

log = logging.getLogger(__name__)


class TrackingLost(RuntimeError):
    pass


class NoCorrespondences(TrackingLost):
    pass


class Correspondence(NamedTuple):
    point: int
    primitive: int
    residual: float
    weight: float


@dataclass
class Correspondences:
    """Matched LiDAR points (sensor frame) and Gaussian centers (world frame)."""

    point_idx: np.ndarray
    prim_idx: np.ndarray
    points: np.ndarray
    point_normals: np.ndarray
    targets: np.ndarray
    target_normals: np.ndarray
    weights: np.ndarray
    residuals: np.ndarray

    def __len__(self):
        return len(self.point_idx)

    def __iter__(self):
        for k in range(len(self)):
            yield Correspondence(int(self.point_idx[k]), int(self.prim_idx[k]),
                                 float(self.residuals[k]), float(self.weights[k]))


@dataclass
class TrackingResult:
    pose: PoseSE3
    iterations: int
    final_cost: float
    inlier_count: int
    converged: bool


@dataclass
class TrackingParams:
    max_iterations: int = 30
    tolerance: float = 1e-5
    min_inliers: int = 50
    max_dist: float = 1.0
    shrink_after: int = 10
    shrink: float = 0.5
    lambda_r: float = 0.1
    robust: bool = True
    use_weights: bool = True
    weight_mode: str = "exact"


class TrackingTarget:
    """Read-only snapshot of the submap used for association.

    Sky primitives are never candidates.
    """

    def __init__(self, gmap: GaussianMap, idx=None, use_weights: bool = True, mode: str = "exact"):
        if idx is None:
            idx = np.flatnonzero(submap_mask(gmap) & ~gmap.sky)
        self.idx = np.asarray(idx, dtype=np.int64)
        self.means = gmap.means[self.idx].copy()
        self.normals = gmap.normals(self.idx)
        if use_weights and len(self.idx):
            self.weights = weights(gmap, self.idx, mode=mode)
        else:
            self.weights = np.ones(len(self.idx))
        self.tree = cKDTree(self.means) if len(self.idx) else None

    def __len__(self):
        return len(self.idx)


def _nearest_lowest_index(tree, n_targets, pts, max_dist):
    k = min(4, n_targets)
    d, j = tree.query(pts, k=k, distance_upper_bound=max_dist)
    if k == 1:
        return d, j
    best = d[:, 0]
    # among equally distant candidates keep the lowest index
    tie = d == best[:, None]
    jj = np.where(tie, j, np.iinfo(np.int64).max)
    return best, jj.min(axis=1)


def associate(cloud_world: PointCloud, target: TrackingTarget, max_dist: float = 1.0) -> Correspondences:
    """Nearest submap Gaussian for every valid-normal point within ``max_dist``.

    ``cloud_world`` is the scan already transformed into the world frame.
    """
    if target.tree is None:
        raise NoCorrespondences("empty submap")
    valid = cloud_world.valid if cloud_world.valid is not None else np.ones(len(cloud_world), bool)
    if cloud_world.normals is not None:
        valid = valid & np.all(np.isfinite(cloud_world.normals), axis=1)
    pidx = np.flatnonzero(valid)
    d, j = _nearest_lowest_index(target.tree, len(target), cloud_world.points[pidx], max_dist)
    ok = np.isfinite(d)
    if not ok.any():
        raise NoCorrespondences("every point is farther than max_dist from the submap")
    pidx, j = pidx[ok], j[ok]
    pts = cloud_world.points[pidx]
    nrm = cloud_world.normals[pidx] if cloud_world.normals is not None else np.zeros_like(pts)
    res = np.sum(nrm * (pts - target.means[j]), axis=1)
    return Correspondences(pidx, target.idx[j], pts, nrm, target.means[j], target.normals[j],
                           target.weights[j], res)


def _terms(corr: Correspondences, pose: PoseSE3):
    R, t = pose.R, pose.translation
    n_w = corr.point_normals @ R.T
    diff = corr.points @ R.T + t - corr.targets
    r = np.sum(n_w * diff, axis=1)
    # d r / d(v, omega) for a right perturbation
    local_off = (t - corr.targets) @ R                  # R^T (t - mu)
    J_r = np.concatenate([corr.point_normals, np.cross(corr.point_normals, local_off)], axis=1)
    e = n_w - corr.target_normals
    return r, J_r, e, n_w


def tracking_cost(corr: Correspondences, pose: PoseSE3, lambda_r: float = 0.1) -> float:
    """sum W (n_p . (T x_p - mu_g))^2 + lambda_r * sum |1 - n_p . n_g| (normals in world)."""
    r, _, _, n_w = _terms(corr, pose)
    reg = np.abs(1.0 - np.sum(n_w * corr.target_normals, axis=1))
    return float(np.sum(corr.weights * r**2) + lambda_r * np.sum(reg))


def tracking_gradient(corr: Correspondences, pose: PoseSE3, lambda_r: float = 0.1) -> np.ndarray:
    """Analytic gradient of ``tracking_cost`` w.r.t. the 6-vector perturbation."""
    r, J_r, e, _ = _terms(corr, pose)
    g = 2.0 * (corr.weights * r) @ J_r
    if lambda_r:
        # lambda (1 - n_w . n_g) == lambda / 2 * |n_w - n_g|^2 for unit normals
        Jn = -pose.R @ _skew_batch(corr.point_normals)
        g[3:] += lambda_r * np.einsum("nij,ni->j", Jn, e)
    return g


def _skew_batch(v):
    S = np.zeros((len(v), 3, 3))
    S[:, 0, 1], S[:, 0, 2] = -v[:, 2], v[:, 1]
    S[:, 1, 0], S[:, 1, 2] = v[:, 2], -v[:, 0]
    S[:, 2, 0], S[:, 2, 1] = -v[:, 1], v[:, 0]
    return S


def _huber_weights(r):
    a = np.abs(r)
    delta = max(3.0 * float(np.median(a)), 1e-6)
    w = np.ones_like(a)
    big = a > delta
    w[big] = delta / a[big]
    return w


def track_frame(frame: Frame, target, initial_pose: PoseSE3, params: Optional[TrackingParams] = None) -> TrackingResult:
    """Gauss-Newton alignment of the frame's scan to the submap."""
    params = params or TrackingParams()
    if isinstance(target, GaussianMap):
        target = TrackingTarget(target, use_weights=params.use_weights, mode=params.weight_mode)
    cloud = frame.cloud
    if cloud.normals is None:
        raise ValueError("frame cloud needs normals")
    keep = cloud.valid.copy()
    pts = cloud.points[keep]
    nrm = cloud.normals[keep]
    if len(pts) < params.min_inliers:
        raise TrackingLost(f"only {len(pts)} usable points (< {params.min_inliers})")
    pose = initial_pose
    converged = False
    corr = None
    it = 0
    for it in range(1, params.max_iterations + 1):
        max_dist = params.max_dist * (params.shrink if it > params.shrink_after else 1.0)
        world = PointCloud(pose.apply(pts), pose.rotate(nrm))
        corr = associate(world, target, max_dist)
        if len(corr) < params.min_inliers:
            raise TrackingLost(f"{len(corr)} inliers (< {params.min_inliers})")
        # keep sensor-frame coordinates for the cost
        corr.points = pts[corr.point_idx]
        corr.point_normals = nrm[corr.point_idx]
        r, J_r, e, _ = _terms(corr, pose)
        w = corr.weights * (_huber_weights(r) if params.robust else 1.0)
        H = (J_r * w[:, None]).T @ J_r
        b = (w * r) @ J_r
        if params.lambda_r:
            Jn = -pose.R @ _skew_batch(corr.point_normals)
            wn = np.full(len(e), 0.5 * params.lambda_r)
            if params.robust:
                wn *= _huber_weights(np.linalg.norm(e, axis=1))
            H[3:, 3:] += np.einsum("n,nki,nkj->ij", wn, Jn, Jn)
            b[3:] += np.einsum("n,nki,nk->i", wn, Jn, e)
        evals = np.linalg.eigvalsh(H)
        if evals[0] <= 1e-12 * max(evals[-1], 1e-300):
            raise TrackingLost("rank-deficient registration system")
        delta = -np.linalg.solve(H, b)
        pose = pose.compose(PoseSE3.exp(delta))
        if np.linalg.norm(delta) < params.tolerance:
            converged = True
            break
    cost = tracking_cost(corr, pose, params.lambda_r)
    return TrackingResult(pose, it, cost, len(corr), converged)


def visible_set(gmap: GaussianMap, pose: PoseSE3, cam: CameraModel, idx=None) -> set:
    if idx is None:
        idx = np.flatnonzero(submap_mask(gmap) & ~gmap.sky)
    pc = cam.world_to_camera(pose).apply(gmap.means[idx])
    u, v, z = cam.project(pc)
    col, row = cam.pixel_index(np.nan_to_num(u), np.nan_to_num(v))
    ok = (z > 0) & (col >= 0) & (col < cam.width) & (row >= 0) & (row < cam.height)
    return set(np.asarray(idx)[ok].tolist())


def covisibility(gmap: GaussianMap, pose_a: PoseSE3, pose_b: PoseSE3, cam: CameraModel, idx=None) -> float:
    """Intersection-over-union of the submap primitives seen from two poses."""
    a = visible_set(gmap, pose_a, cam, idx)
    b = visible_set(gmap, pose_b, cam, idx)
    union = len(a | b)
    if union == 0:
        return 1.0
    return len(a & b) / union


def keyframe_decision(covis: float, threshold: float = 0.85) -> bool:
    return covis < threshold
