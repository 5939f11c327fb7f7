"""Differentiable splatting of the Gaussian map into color and depth images.

Each primitive is projected with the local affine (EWA) approximation,
low-pass dilated by 0.3 px, truncated at its 3-sigma ellipse and composited
front-to-back in camera-depth order. The truncated kernel is exp(p) minus its
tangent at the cutoff, rescaled to 1 at the center, so both the footprint and
its slope vanish on the ellipse and the images stay C1 in every parameter.

Pose gradients are with respect to a right perturbation ``pose @ exp(xi)`` of
the rig pose, ``xi = (v, omega)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numba
import numpy as np

from . import _raster
from .core import CameraModel, PoseSE3

DILATION = 0.3
NEAR = 0.2                   # splats whose 3-sigma depth extent reaches this are dropped
TILE = 16


@dataclass
class Projection:
    """Per-primitive screen-space quantities cached between passes."""

    index: np.ndarray          # map indices of the visible primitives
    p_cam: np.ndarray          # camera-frame means
    J: np.ndarray              # 2x3 projection Jacobians
    cov_cam: np.ndarray        # camera-frame 3D covariances
    cov2d: np.ndarray          # dilated 2x2 covariances
    conic: np.ndarray          # (a, b, c) of the inverse 2D covariance
    uv: np.ndarray
    alpha: np.ndarray
    colors: np.ndarray
    dflag: np.ndarray
    bbox: np.ndarray           # xmin, xmax, ymin, ymax
    R_cw: np.ndarray
    t_cw: np.ndarray
    R_scale: np.ndarray        # quaternion rotations of the visible primitives
    scales: np.ndarray


@dataclass
class RenderBuffer:
    color: np.ndarray
    depth: np.ndarray
    alpha_accum: np.ndarray
    transmittance: np.ndarray
    proj: Optional[Projection] = None
    tiles: Optional[tuple] = None
    last: Optional[np.ndarray] = None


@dataclass
class Gradients:
    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity: np.ndarray
    colors: np.ndarray
    pose: np.ndarray = field(default_factory=lambda: np.zeros(6))
    visible: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def _map_arrays(gmap):
    n = len(gmap.means)
    sky = getattr(gmap, "sky", None)
    if sky is None:
        sky = np.zeros(n, dtype=bool)
    return gmap.means, gmap.quats, gmap.log_scales, gmap.opacity, gmap.colors, sky


def project(gmap, pose: PoseSE3, cam: CameraModel) -> Projection:
    means, quats, log_scales, opacity, colors, sky = _map_arrays(gmap)
    T_cw = cam.world_to_camera(pose)
    R_cw, t_cw = T_cw.R, T_cw.translation
    gi, p, J, Rq, s, cov_cam, cov2d, conic, uv, bbox = _raster.project_all(
        np.ascontiguousarray(means, dtype=np.float64), np.ascontiguousarray(quats, dtype=np.float64),
        np.ascontiguousarray(log_scales, dtype=np.float64), np.ascontiguousarray(opacity, dtype=np.float64),
        np.ascontiguousarray(R_cw), np.ascontiguousarray(t_cw, dtype=np.float64), float(cam.fx), float(cam.fy),
        float(cam.cx), float(cam.cy), cam.width, cam.height, NEAR, DILATION)
    return Projection(
        index=gi, p_cam=p, J=J, cov_cam=cov_cam, cov2d=cov2d, conic=conic, uv=uv,
        alpha=opacity[gi].astype(np.float64), colors=np.ascontiguousarray(colors[gi], dtype=np.float64),
        dflag=(~sky[gi]).astype(np.float64), bbox=bbox, R_cw=R_cw, t_cw=t_cw, R_scale=Rq, scales=s)


def _tiles(proj: Projection, cam: CameraModel):
    tiles_x = -(-cam.width // TILE)
    tiles_y = -(-cam.height // TILE)
    # front-to-back; equal depths fall back to map index
    order = np.lexsort((proj.index, proj.p_cam[:, 2])).astype(np.int64)
    b = proj.bbox
    offsets, lists = _raster.bin_tiles(order, np.ascontiguousarray(b[:, 0]), np.ascontiguousarray(b[:, 1]),
                                       np.ascontiguousarray(b[:, 2]), np.ascontiguousarray(b[:, 3]),
                                       tiles_x, tiles_y, TILE)
    return offsets, lists, tiles_x


def _kernel_args(proj: Projection):
    return (np.ascontiguousarray(proj.uv[:, 0]), np.ascontiguousarray(proj.uv[:, 1]),
            np.ascontiguousarray(proj.conic[:, 0]), np.ascontiguousarray(proj.conic[:, 1]),
            np.ascontiguousarray(proj.conic[:, 2]), np.ascontiguousarray(proj.alpha), proj.colors,
            np.ascontiguousarray(proj.p_cam[:, 2]), proj.dflag)


def render(gmap, pose: PoseSE3, cam: CameraModel) -> RenderBuffer:
    """Forward pass: color, depth and accumulated opacity images."""
    H, W = cam.height, cam.width
    color = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    alpha = np.zeros((H, W))
    trans = np.ones((H, W))
    last = np.zeros((H, W), dtype=np.int64)
    proj = project(gmap, pose, cam)
    if len(proj.index) == 0:
        return RenderBuffer(color, depth, alpha, trans, proj, None, last)
    offsets, lists, tiles_x = _tiles(proj, cam)
    _raster.forward(offsets, lists, *_kernel_args(proj), proj.bbox, W, H, tiles_x, TILE, color, depth, alpha, trans,
                    last)
    return RenderBuffer(color, depth, alpha, trans, proj, (offsets, lists, tiles_x), last)


def render_with_gradients(gmap, pose: PoseSE3, cam: CameraModel, dl_dcolor, dl_ddepth=None,
                          dl_dalpha=None, buffer: Optional[RenderBuffer] = None,
                          threads: Optional[int] = None) -> Gradients:
    """Reverse pass: gradients of sum(dl_dcolor*C + dl_ddepth*D + dl_dalpha*A)."""
    n = len(gmap.means)
    zero = Gradients(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n), np.zeros((n, 3)))
    if buffer is None:
        buffer = render(gmap, pose, cam)
    proj = buffer.proj
    if proj is None or len(proj.index) == 0 or buffer.tiles is None:
        return zero
    H, W = cam.height, cam.width
    gC = np.ascontiguousarray(np.broadcast_to(dl_dcolor if dl_dcolor is not None else 0.0, (H, W, 3)), dtype=np.float64)
    gD = np.ascontiguousarray(np.broadcast_to(dl_ddepth if dl_ddepth is not None else 0.0, (H, W)), dtype=np.float64)
    gA = np.ascontiguousarray(np.broadcast_to(dl_dalpha if dl_dalpha is not None else 0.0, (H, W)), dtype=np.float64)
    offsets, lists, tiles_x = buffer.tiles
    n_chunks = int(threads or numba.get_num_threads())
    raw = _raster.backward(offsets, lists, *_kernel_args(proj), proj.bbox, W, H, tiles_x, TILE, buffer.last,
                           buffer.transmittance, gC, gD, gA, len(proj.index), n_chunks)
    g = raw[0].copy()
    for k in range(1, raw.shape[0]):
        g += raw[k]
    q = np.asarray(gmap.quats, dtype=np.float64)[proj.index]
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    T_cl = cam.T_cam_lidar
    g_mean, g_log_scales, g_quat, g_pose = _raster.chain(
        g, proj.conic, proj.J, proj.cov_cam, proj.p_cam, np.ascontiguousarray(proj.R_cw), proj.R_scale,
        proj.scales, q, np.ascontiguousarray(T_cl.R), np.asarray(T_cl.translation, dtype=np.float64),
        float(cam.fx), float(cam.fy))

    out = zero
    gi = proj.index
    out.means[gi] = g_mean
    out.log_scales[gi] = g_log_scales
    out.quats[gi] = g_quat
    out.opacity[gi] = g[:, 6]
    out.colors[gi] = g[:, 7:10]
    out.pose = g_pose
    out.visible = gi
    return out
