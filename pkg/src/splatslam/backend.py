"""Back-end: keyframe pose refinement followed by a Gaussian map update.

Both rounds minimise ``(1 - l1) * E_pho + l1 * E_geo + l2 * E_normal`` where
E_pho and E_geo are mean absolute errors of the rendered color and depth
(depth only where the LiDAR saw something) and E_normal is the mean smallest
scale of the primitives in view.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import gaussian_map as gm
from .core import LOG_SCALE_FLOOR, CameraModel, PoseSE3
from .renderer import Gradients, render, render_with_gradients
from .sensor import Frame

log = logging.getLogger(__name__)


@dataclass
class LossBreakdown:
    E_pho: float
    E_geo: float
    E_normal: float
    total: float
    lambda1: float
    lambda2: float

    @staticmethod
    def combine(E_pho, E_geo, E_normal, lambda1, lambda2) -> "LossBreakdown":
        total = (1.0 - lambda1) * E_pho + lambda1 * E_geo + lambda2 * E_normal
        return LossBreakdown(float(E_pho), float(E_geo), float(E_normal), float(total), lambda1, lambda2)


@dataclass
class KeyframeRecord:
    frame: Frame
    pose: PoseSE3
    insertion_event: int


@dataclass
class BackendParams:
    lambda1: float = 0.5
    lambda2: float = 0.01
    pose_iters: int = 5
    map_iters: int = 30
    batch_size: int = 5
    window: int = 5
    lr_pose: float = 5e-4            # small: the rendered loss is only cm-accurate here
    lr_means: float = 1.6e-4
    lr_log_scales: float = 5e-3
    lr_quats: float = 1e-3
    lr_opacity: float = 5e-2
    lr_colors: float = 2.5e-3
    extent: Optional[float] = None
    opacity_floor: float = 0.05
    stale_window: int = 10
    color_only_stride: int = 8
    cgc_children: int = 0
    freeze_anchored: bool = True
    seed: int = 0
    threads: Optional[int] = None


def compute_loss(gmap, kf: KeyframeRecord, cam: CameraModel, lambda1: float = 0.5, lambda2: float = 0.01,
                 with_grad: bool = False, threads=None):
    """Loss of one keyframe; with ``with_grad`` also returns the renderer Gradients."""
    buf = render(gmap, kf.pose, cam)
    image = kf.frame.image
    diff = buf.color - image
    E_pho = float(np.mean(np.abs(diff)))
    lidar = kf.frame.depth > 0
    n_geo = int(lidar.sum())
    ddepth = np.where(lidar, buf.depth - kf.frame.depth, 0.0)
    E_geo = float(np.sum(np.abs(ddepth)) / n_geo) if n_geo else 0.0
    vis = buf.proj.index
    if len(vis):
        s = np.exp(gmap.log_scales[vis])
        k = np.argmin(s, axis=1)
        s_min = s[np.arange(len(vis)), k]
        E_normal = float(np.mean(s_min))
    else:
        E_normal = 0.0
    loss = LossBreakdown.combine(E_pho, E_geo, E_normal, lambda1, lambda2)
    if not with_grad:
        return loss
    gC = (1.0 - lambda1) * np.sign(diff) / diff.size
    gD = lambda1 * np.sign(ddepth) / n_geo if n_geo else None
    grads = render_with_gradients(gmap, kf.pose, cam, gC, gD, buffer=buf, threads=threads)
    if len(vis) and lambda2:
        grads.log_scales[vis, k] += lambda2 * s_min / len(vis)
    return loss, grads


def _window_loss(gmap, window, cam, lambda1, lambda2, with_grad=False, threads=None):
    out = [compute_loss(gmap, kf, cam, lambda1, lambda2, with_grad, threads) for kf in window]
    if not with_grad:
        return out
    return [o[0] for o in out], [o[1] for o in out]


def _mean_total(losses):
    return float(np.mean([l.total for l in losses]))


def optimize_poses(gmap, window: list, cam: CameraModel, iters: int = 10, lambda1: float = 0.5,
                   lambda2: float = 0.01, fixed=(), threads=None, log_rows=None, batch: int = 0,
                   lr: float = 5e-3) -> list:
    """Adam on the twists of the non-fixed window poses, with a monotone safeguard.

    The map is frozen here, so each keyframe's loss depends on its own pose
    only and steps are accepted per keyframe: a proposal is halved until that
    keyframe's loss does not rise, and skipped after three halvings. ``fixed``
    holds records whose pose must not move (the gauge). Returns the mean
    window loss after each iteration.
    """
    free = [kf for kf in window if id(kf) not in {id(f) for f in fixed}]
    history = []
    if iters <= 0 or not free:
        return history
    losses, grads = _window_loss(gmap, free, cam, lambda1, lambda2, True, threads)
    g = np.stack([gr.pose for gr in grads]) / len(free)
    adam = _Adam(g.shape, lr)
    for it in range(iters):
        if not np.any(g):
            break
        step = -adam.step(np.zeros_like(g), g)
        for j, kf in enumerate(free):
            if not np.any(step[j]):
                continue
            saved = kf.pose
            scale = 1.0
            for _ in range(4):
                kf.pose = saved.compose(PoseSE3.exp(-scale * step[j]))
                trial = compute_loss(gmap, kf, cam, lambda1, lambda2).total
                if trial <= losses[j].total:
                    losses[j], gr = compute_loss(gmap, kf, cam, lambda1, lambda2, True, threads)
                    g[j] = gr.pose / len(free)
                    break
                scale *= 0.5
            else:
                kf.pose = saved
        history.append(_mean_total(losses))
        if log_rows is not None:
            _log(log_rows, batch, 1, it, losses)
    return history


def _log(rows, batch, rnd, it, losses):
    rows.append((batch, rnd, it, float(np.mean([l.E_pho for l in losses])),
                 float(np.mean([l.E_geo for l in losses])), float(np.mean([l.E_normal for l in losses])),
                 _mean_total(losses)))


class _Adam:
    def __init__(self, shape, lr, beta1=0.9, beta2=0.999, eps=1e-15):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0

    def step(self, x, g):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1**self.t)
        vh = self.v / (1 - self.b2**self.t)
        return x - self.lr * mh / (np.sqrt(vh) + self.eps)


def _logit(a):
    a = np.clip(a, 1e-6, 1 - 1e-6)
    return np.log(a / (1 - a))


def scene_extent(gmap) -> float:
    pts = gmap.means[~gmap.sky] if len(gmap) else np.zeros((0, 3))
    if len(pts) == 0:
        return 1.0
    return float(max(np.max(np.linalg.norm(pts - pts.mean(axis=0), axis=1)), 1e-6))


def visible_union(gmap, window, cam) -> np.ndarray:
    from .renderer import project
    seen = np.zeros(len(gmap), dtype=bool)
    for kf in window:
        seen[project(gmap, kf.pose, cam).index] = True
    return np.flatnonzero(seen)


GEOMETRY = ("means", "quats")


def optimize_map(gmap, window: list, cam: CameraModel, iters: int = 30, params: Optional[BackendParams] = None,
                 log_rows=None, batch: int = 0, optimize=("means", "log_scales", "quats", "opacity", "colors")) -> list:
    """Adam over every primitive visible from some window keyframe.

    ``optimize`` selects which parameter groups move. With
    ``params.freeze_anchored`` reliable primitives keep their means and
    rotations (LiDAR placed them); their scales, opacity and colour still
    adapt. Returns the mean total loss before each step.
    """
    p = params or BackendParams()
    history = []
    if iters <= 0 or not window or len(gmap) == 0:
        return history
    idx = visible_union(gmap, window, cam)
    if len(idx) == 0:
        return history
    extent = p.extent if p.extent is not None else scene_extent(gmap)
    groups = {
        "means": (gmap.means[idx].copy(), p.lr_means * extent),
        "log_scales": (gmap.log_scales[idx].copy(), p.lr_log_scales),
        "quats": (gmap.quats[idx].copy(), p.lr_quats),
        "opacity": (_logit(gmap.opacity[idx]), p.lr_opacity),
        "colors": (gmap.colors[idx].copy(), p.lr_colors),
    }
    state = {k: v[0] for k, v in groups.items() if k in optimize}
    # LiDAR-anchored primitives keep their metric geometry; only appearance moves
    frozen = gmap.reliable[idx] & ~gmap.sky[idx] if p.freeze_anchored else np.zeros(len(idx), bool)
    adams = {k: _Adam(v.shape, groups[k][1]) for k, v in state.items()}
    for it in range(iters):
        losses, grads = _window_loss(gmap, window, cam, p.lambda1, p.lambda2, True, p.threads)
        history.append(_mean_total(losses))
        if log_rows is not None:
            _log(log_rows, batch, 2, it, losses)
        g = _sum_grads(grads, idx, len(window))
        alpha = gmap.opacity[idx]
        g["opacity"] = g["opacity"] * alpha * (1 - alpha)
        saved = {k: v.copy() for k, v in state.items()}
        for k in state:
            state[k] = adams[k].step(state[k], g[k])
            if k in GEOMETRY and frozen.any():
                state[k][frozen] = saved[k][frozen]
        if "colors" in state:
            state["colors"] = np.clip(state["colors"], 0.0, 1.0)
        if "log_scales" in state:
            state["log_scales"] = np.maximum(state["log_scales"], LOG_SCALE_FLOOR)
        if "quats" in state:
            state["quats"] /= np.linalg.norm(state["quats"], axis=1, keepdims=True)
        if not all(np.all(np.isfinite(v)) for v in state.values()):
            log.warning("non-finite parameters at map iteration %d; round stopped", it)
            state = saved
            _write(gmap, idx, state)
            break
        _write(gmap, idx, state)
    return history


def _sum_grads(grads: list, idx, n) -> dict:
    out = {}
    for name in ("means", "log_scales", "quats", "opacity", "colors"):
        acc = getattr(grads[0], name)[idx].copy()
        for gr in grads[1:]:
            acc += getattr(gr, name)[idx]
        out[name] = acc / n
    return out


def _write(gmap, idx, state):
    if "means" in state:
        gmap.means[idx] = state["means"]
        gmap.invalidate()
    if "log_scales" in state:
        gmap.log_scales[idx] = state["log_scales"]
    if "quats" in state:
        gmap.quats[idx] = state["quats"]
    if "opacity" in state:
        # same bounds as _logit; alpha of exactly 1 would break the T / (1 - a) recovery
        gmap.opacity[idx] = np.clip(1.0 / (1.0 + np.exp(-state["opacity"])), 1e-6, 1 - 1e-6)
    if "colors" in state:
        gmap.colors[idx] = state["colors"]


class Backend:
    """Owns the keyframe list and runs both rounds on queued keyframes."""

    def __init__(self, gmap: gm.GaussianMap, cam: CameraModel, params: Optional[BackendParams] = None):
        self.map = gmap
        self.cam = cam
        self.params = params or BackendParams()
        self.keyframes: list[KeyframeRecord] = []
        self.queue: list[KeyframeRecord] = []
        self.log_rows: list = []
        self.batches = 0

    def enqueue(self, frame: Frame, pose: PoseSE3) -> KeyframeRecord:
        kf = KeyframeRecord(frame, pose, len(self.keyframes) + len(self.queue))
        self.queue.append(kf)
        return kf

    def backend_step(self) -> dict:
        """Insert up to ``batch_size`` queued keyframes, then run one batch of both rounds."""
        p = self.params
        batch, self.queue = self.queue[:p.batch_size], self.queue[p.batch_size:]
        if not batch:
            return {"batch": None, "inserted": 0}
        inserted = 0
        for kf in batch:
            inserted += gm.insert_keyframe_points(self.map, kf.frame, kf.pose, self.cam)
            gm.seed_color_only(self.map, kf.frame, kf.pose, self.cam, stride=p.color_only_stride)
            self.keyframes.append(kf)
        pending = np.flatnonzero(~self.map.reliable & ~self.map.sky & ~self.map.split_pending)
        split = 0
        if len(pending):
            try:
                split = len(gm.cgc_split(self.map, pending, batch[-1].frame.index, p.seed, p.cgc_children))
            except gm.NoReliableAnchor:
                log.warning("no reliable anchor; %d color-only primitives left unsplit", len(pending))
        window = self.keyframes[-p.window:]
        b = self.batches
        # fit the new splats first so the pose round does not chase an unfitted map
        map_hist = optimize_map(self.map, window, self.cam, p.map_iters, p, self.log_rows, b)
        pose_hist = []
        if len(self.keyframes) > 1:
            pose_hist = optimize_poses(self.map, window, self.cam, p.pose_iters, p.lambda1, p.lambda2,
                                       fixed=[self.keyframes[0]], threads=p.threads, log_rows=self.log_rows,
                                       batch=b, lr=p.lr_pose)
        self.map.rounds[:] += 1
        pruned = gm.prune(self.map, p.opacity_floor, p.stale_window)
        promoted = gm.promote_survivors(self.map)
        self.batches += 1
        return {"batch": b, "keyframes": len(batch), "inserted": inserted, "split": split, "pruned": pruned,
                "promoted": promoted, "pose_loss": pose_hist[-1] if pose_hist else None,
                "map_loss": map_hist[-1] if map_hist else None}

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["batch", "round", "iter", "E_pho", "E_geo", "E_normal", "total"])
            for row in self.log_rows:
                w.writerow([row[0], row[1], row[2]] + [repr(float(x)) for x in row[3:]])
