"""Trajectory and image-quality metrics."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import PoseSE3

PSNR_CAP = 99.0
RELATIVE_LENGTHS = (10.0, 20.0, 50.0, 100.0)


class InsufficientOverlap(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass
class TrajectoryMetrics:
    ate_rmse: float
    t_rel: float            # percent of segment length
    r_rel: float            # degrees per 100 units
    matched: int = 0
    lengths: list = field(default_factory=list)


@dataclass
class ImageMetrics:
    ssim: float
    psnr: float
    composite: float
    lpips: float = 0.0


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

def associate_stamps(a, b, tolerance=0.02):
    """Greedy nearest-time matching; returns index pairs sorted by ``a``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    pairs = []
    if len(b) == 0:
        return pairs
    used = np.zeros(len(b), dtype=bool)
    order_b = np.argsort(b, kind="stable")
    sb = b[order_b]
    for i, t in enumerate(a):
        k = np.searchsorted(sb, t)
        best, best_d = -1, tolerance
        for c in (k - 1, k):
            if 0 <= c < len(sb) and not used[order_b[c]] and abs(sb[c] - t) <= best_d:
                best, best_d = order_b[c], abs(sb[c] - t)
        if best >= 0:
            used[best] = True
            pairs.append((i, int(best)))
    return pairs


def umeyama(src, dst):
    """Rotation R and translation t minimising sum |R src + t - dst|^2 (no scale)."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    C = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return R, mu_d - R @ mu_s


def _relative_errors(est: Sequence[PoseSE3], gt: Sequence[PoseSE3], lengths):
    pos = np.array([p.translation for p in gt])
    dist = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pos, axis=0), axis=1))])
    t_err, r_err = [], []
    for L in lengths:
        for i in range(len(gt)):
            j = int(np.searchsorted(dist, dist[i] + L, side="left"))
            if j >= len(gt):
                break
            d_gt = gt[i].inverse().compose(gt[j])
            d_est = est[i].inverse().compose(est[j])
            err = d_gt.inverse().compose(d_est)
            t_err.append(100.0 * np.linalg.norm(err.translation) / L)
            r_err.append(100.0 * math.degrees(err.angle_to(PoseSE3.identity())) / L)
    if not t_err:
        return 0.0, 0.0
    return float(np.mean(t_err)), float(np.mean(r_err))


def evaluate_trajectory(est_stamps, est_poses, gt_stamps, gt_poses, tolerance: float = 0.02,
                        lengths=RELATIVE_LENGTHS) -> TrajectoryMetrics:
    """Rigidly align the estimate to ground truth, then ATE RMSE and relative drift.

    Relative errors use sub-trajectory lengths no longer than the path; if
    the path is shorter than all of them, 10..50% of its length is used.
    """
    pairs = associate_stamps(est_stamps, gt_stamps, tolerance)
    if len(pairs) < 2:
        raise InsufficientOverlap(f"only {len(pairs)} timestamp matches between estimate and ground truth")
    est = [est_poses[i] for i, _ in pairs]
    gt = [gt_poses[j] for _, j in pairs]
    P = np.array([p.translation for p in est])
    G = np.array([p.translation for p in gt])
    R, t = umeyama(P, G)
    align = PoseSE3.from_rt(R, t)
    est = [align.compose(p) for p in est]
    resid = np.array([p.translation for p in est]) - G
    ate = float(np.sqrt(np.mean(np.sum(resid**2, axis=1))))
    path = float(np.sum(np.linalg.norm(np.diff(G, axis=0), axis=1)))
    use = [L for L in lengths if L <= path]
    if not use and path > 0:
        use = [f * path for f in (0.1, 0.2, 0.3, 0.4, 0.5)]
    t_rel, r_rel = _relative_errors(est, gt, use)
    return TrajectoryMetrics(ate, t_rel, r_rel, len(pairs), [float(x) for x in use])


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _check(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)


def ssim(a, b, sigma: float = 1.5, radius: int = 5) -> float:
    """Gaussian-windowed SSIM (11x11, sigma 1.5) over the fully covered region, channel mean."""
    a, b = _check(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < 2 * radius + 1:
        raise DimensionMismatch(f"images smaller than the {2 * radius + 1}px SSIM window")
    C1, C2 = 0.01**2, 0.03**2
    trunc = radius / sigma                 # exactly ``radius`` taps each side
    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        f = lambda z: gaussian_filter(z, sigma, truncate=trunc)[radius:-radius, radius:-radius]
        mx, my = f(x), f(y)
        vx = f(x * x) - mx * mx
        vy = f(y * y) - my * my
        cxy = f(x * y) - mx * my
        s = ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))
        vals.append(float(s.mean()))
    return float(np.mean(vals))


def image_metrics(rendered, target, lpips: Optional[Callable] = None) -> ImageMetrics:
    a, b = _check(rendered, target)
    s = ssim(a, b)
    p = psnr(a, b)
    lp = float(lpips(a, b)) if lpips is not None else 0.0
    return ImageMetrics(s, p, s + p / 30.0 + (1.0 - lp), lp)


def write_report(path, rows) -> None:
    """One JSON object per line."""
    with open(path, "w") as fh:
        for row in rows:
            if hasattr(row, "__dataclass_fields__"):
                row = asdict(row)
            fh.write(json.dumps(row, sort_keys=True) + "\n")
