"""Turning raw scans and images into frames."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from scipy.spatial import cKDTree

from .core import CameraModel, PoseSE3
from .fileio import MissingCalibration, UnreadableFile, read_calib, read_ppm, read_xyz

log = logging.getLogger(__name__)


class DegenerateNeighborhood(ValueError):
    """Raised (in strict mode) when a k-NN neighbourhood has rank < 2."""


@dataclass
class PointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None
    valid: Optional[np.ndarray] = None
    timestamp: float = 0.0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != len(self.points):
                raise ValueError("normals and points differ in length")
        if self.valid is None:
            self.valid = np.ones(len(self.points), dtype=bool)

    def __len__(self):
        return len(self.points)

    def transformed(self, pose: PoseSE3) -> "PointCloud":
        normals = None if self.normals is None else pose.rotate(self.normals)
        return PointCloud(pose.apply(self.points), normals, self.valid.copy(), self.timestamp)

    def without_normals(self) -> "PointCloud":
        return PointCloud(self.points.copy(), None, None, self.timestamp)


@dataclass
class Frame:
    index: int
    timestamp: float
    image: np.ndarray
    cloud: PointCloud
    depth: np.ndarray
    pose_guess: PoseSE3 = field(default_factory=PoseSE3)


def project_to_depth(cloud: PointCloud, cam: CameraModel) -> np.ndarray:
    """Z-buffered metric depth image of a LiDAR cloud seen from the camera."""
    depth = np.zeros((cam.height, cam.width))
    if len(cloud) == 0:
        return depth
    pc = cam.T_cam_lidar.apply(cloud.points)
    u, v, z = cam.project(pc)
    col, row = cam.pixel_index(np.nan_to_num(u), np.nan_to_num(v))
    ok = (z > 0) & (col >= 0) & (col < cam.width) & (row >= 0) & (row < cam.height)
    col, row, z = col[ok], row[ok], z[ok]
    flat = row * cam.width + col
    best = np.full(cam.width * cam.height, np.inf)
    np.minimum.at(best, flat, z)
    best[np.isinf(best)] = 0.0
    return best.reshape(cam.height, cam.width)


def estimate_normals(cloud: PointCloud, k: int = 10, viewpoint=(0.0, 0.0, 0.0), strict: bool = False) -> PointCloud:
    """PCA normals over the k nearest neighbours, oriented toward ``viewpoint``.

    Points whose neighbourhood is (near) collinear get ``valid = False``.
    """
    if k < 3:
        raise ValueError("k must be >= 3")
    pts = cloud.points
    if len(pts) < k + 1:
        raise ValueError(f"need at least {k + 1} points for k={k}")
    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=k + 1)
    nb = pts[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    scatter = np.einsum("nki,nkj->nij", centered, centered)
    evals, evecs = np.linalg.eigh(scatter)
    normals = evecs[:, :, 0]
    degenerate = evals[:, 1] <= 1e-10 * np.maximum(evals[:, 2], 1e-300)
    to_view = np.asarray(viewpoint, dtype=np.float64) - pts
    flip = np.sum(normals * to_view, axis=1) < 0
    normals[flip] *= -1
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    if strict and degenerate.any():
        raise DegenerateNeighborhood(f"{int(degenerate.sum())} points have collinear neighbourhoods")
    return PointCloud(pts.copy(), normals, ~degenerate, cloud.timestamp)


# ---------------------------------------------------------------------------
# dataset reading
# ---------------------------------------------------------------------------

@dataclass
class SequenceConfig:
    pair_tolerance: float = 0.05
    normals_k: int = 10
    compute_normals: bool = True


def _stamped_files(directory: Path, suffix: str):
    if not directory.is_dir():
        return []
    out = []
    for name in os.listdir(directory):
        if not name.endswith(suffix):
            continue
        try:
            out.append((float(name[: -len(suffix)]), directory / name))
        except ValueError:
            log.warning("ignoring file with non-numeric timestamp: %s", directory / name)
    out.sort(key=lambda x: x[0])
    return out


def read_camera(path) -> CameraModel:
    """Camera from a dataset directory (calib.txt plus the first image for size)."""
    path = Path(path)
    K, T_cl = read_calib(path / "calib.txt")
    imgs = _stamped_files(path / "images", ".ppm")
    if not imgs:
        raise UnreadableFile(path / "images", "no images to infer the camera size from")
    h, w = read_ppm(imgs[0][1]).shape[:2]
    return CameraModel(K[0, 0], K[1, 1], K[0, 2], K[1, 2], w, h, T_cl)


def pair_by_timestamp(image_stamps, scan_stamps, tolerance):
    """Greedy nearest-timestamp pairing; returns list of (image_i, scan_j)."""
    pairs = []
    used = set()
    scan_stamps = np.asarray(scan_stamps, dtype=np.float64)
    for i, t in enumerate(image_stamps):
        if len(scan_stamps) == 0:
            break
        order = np.argsort(np.abs(scan_stamps - t), kind="stable")
        for j in order:
            if abs(scan_stamps[j] - t) > tolerance:
                break
            if j not in used:
                used.add(int(j))
                pairs.append((i, int(j)))
                break
    return pairs


class SequenceReader:
    """Iterable over the frames of a dataset directory.

    ``skipped`` counts images and scans that found no partner.
    """

    def __init__(self, path, config: SequenceConfig | None = None):
        self.path = Path(path)
        self.config = config or SequenceConfig()
        self.images = _stamped_files(self.path / "images", ".ppm")
        self.scans = _stamped_files(self.path / "scans", ".xyz")
        self.camera: CameraModel | None = None
        if self.images or self.scans:
            if not (self.path / "calib.txt").exists():
                raise MissingCalibration(f"calibration file not found: {self.path / 'calib.txt'}")
            if self.images:
                self.camera = read_camera(self.path)
        self.pairs = pair_by_timestamp([t for t, _ in self.images], [t for t, _ in self.scans],
                                       self.config.pair_tolerance)
        self.skipped = len(self.images) + len(self.scans) - 2 * len(self.pairs)
        if self.skipped:
            log.warning("%d unpaired images/scans skipped in %s", self.skipped, self.path)

    def __len__(self):
        return len(self.pairs)

    def __iter__(self) -> Iterator[Frame]:
        for index, (i, j) in enumerate(self.pairs):
            t_img, img_path = self.images[i]
            t_scan, scan_path = self.scans[j]
            image = read_ppm(img_path)
            cloud = PointCloud(read_xyz(scan_path), timestamp=t_scan)
            if self.config.compute_normals and len(cloud) > self.config.normals_k:
                cloud = estimate_normals(cloud, self.config.normals_k)
            depth = project_to_depth(cloud, self.camera)
            yield Frame(index, t_scan, image, cloud, depth)


def load_sequence(path, config: SequenceConfig | None = None) -> SequenceReader:
    return SequenceReader(path, config)


def with_normals(frame: Frame, k: int = 10) -> Frame:
    return replace(frame, cloud=estimate_normals(frame.cloud, k))
