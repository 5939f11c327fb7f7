"""Geometry primitives shared across the package.

Quaternions are stored scalar-first (w, x, y, z). Poses map points from the
local frame into the parent frame: ``p_parent = R @ p_local + t``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

SCALE_FLOOR = 1e-4
LOG_SCALE_FLOOR = float(np.log(SCALE_FLOOR))


# ---------------------------------------------------------------------------
# quaternion / rotation helpers (batched where it matters)
# ---------------------------------------------------------------------------

def normalize_quat(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotmat(q):
    """Rotation matrix (..., 3, 3) for unit quaternions (..., 4) in wxyz order."""
    q = normalize_quat(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R):
    """Unit quaternion (wxyz, w >= 0) from rotation matrices (..., 3, 3)."""
    R = np.asarray(R, dtype=np.float64)
    batch = R.shape[:-2]
    R = R.reshape(-1, 3, 3)
    q = np.empty((R.shape[0], 4))
    tr = np.trace(R, axis1=1, axis2=2)
    for i, M in enumerate(R):
        # Shepperd's method: branch on the largest diagonal term for stability
        if tr[i] > 0:
            s = 2.0 * np.sqrt(tr[i] + 1.0)
            q[i] = (0.25 * s, (M[2, 1] - M[1, 2]) / s, (M[0, 2] - M[2, 0]) / s, (M[1, 0] - M[0, 1]) / s)
        elif M[0, 0] > M[1, 1] and M[0, 0] > M[2, 2]:
            s = 2.0 * np.sqrt(1.0 + M[0, 0] - M[1, 1] - M[2, 2])
            q[i] = ((M[2, 1] - M[1, 2]) / s, 0.25 * s, (M[0, 1] + M[1, 0]) / s, (M[0, 2] + M[2, 0]) / s)
        elif M[1, 1] > M[2, 2]:
            s = 2.0 * np.sqrt(1.0 + M[1, 1] - M[0, 0] - M[2, 2])
            q[i] = ((M[0, 2] - M[2, 0]) / s, (M[0, 1] + M[1, 0]) / s, 0.25 * s, (M[1, 2] + M[2, 1]) / s)
        else:
            s = 2.0 * np.sqrt(1.0 + M[2, 2] - M[0, 0] - M[1, 1])
            q[i] = ((M[1, 0] - M[0, 1]) / s, (M[0, 2] + M[2, 0]) / s, (M[1, 2] + M[2, 1]) / s, 0.25 * s)
    q = normalize_quat(q)
    q[q[:, 0] < 0] *= -1
    return q.reshape(batch + (4,))


def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def skew(v):
    v = np.asarray(v, dtype=np.float64)
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1] = -v[..., 2]
    S[..., 0, 2] = v[..., 1]
    S[..., 1, 0] = v[..., 2]
    S[..., 1, 2] = -v[..., 0]
    S[..., 2, 0] = -v[..., 1]
    S[..., 2, 1] = v[..., 0]
    return S


def so3_exp(omega):
    """Rodrigues' formula; returns a 3x3 rotation."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    K = skew(omega)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(theta) / theta * K + (1 - np.cos(theta)) / theta**2 * K @ K


def so3_log(R):
    q = rotmat_to_quat(R)
    return quat_to_rotvec(q)


def quat_to_rotvec(q):
    q = normalize_quat(q)
    if q[0] < 0:
        q = -q
    n = np.linalg.norm(q[1:])
    if n < 1e-12:
        return 2.0 * q[1:]
    angle = 2.0 * np.arctan2(n, q[0])
    return q[1:] / n * angle


def rotvec_to_quat(v):
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v)
    if theta < 1e-12:
        q = np.array([1.0, 0.5 * v[0], 0.5 * v[1], 0.5 * v[2]])
        return q / np.linalg.norm(q)
    half = 0.5 * theta
    return np.concatenate([[np.cos(half)], np.sin(half) * v / theta])


def _left_jacobian(omega):
    theta = np.linalg.norm(omega)
    K = skew(omega)
    if theta < 1e-8:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    return (np.eye(3) + (1 - np.cos(theta)) / theta**2 * K
            + (theta - np.sin(theta)) / theta**3 * K @ K)


# ---------------------------------------------------------------------------
# rigid transforms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform stored as a unit quaternion (wxyz) and a translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = normalize_quat(np.asarray(self.rotation, dtype=np.float64).reshape(4))
        if q[0] < 0:
            q = -q
        t = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "PoseSE3":
        T = np.asarray(T, dtype=np.float64)
        return cls(rotmat_to_quat(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_rt(cls, R, t) -> "PoseSE3":
        return cls(rotmat_to_quat(R), t)

    @classmethod
    def exp(cls, xi) -> "PoseSE3":
        """Exponential map of a twist ordered (vx, vy, vz, wx, wy, wz)."""
        xi = np.asarray(xi, dtype=np.float64)
        v, omega = xi[:3], xi[3:]
        return cls(rotvec_to_quat(omega), _left_jacobian(omega) @ v)

    def log(self) -> np.ndarray:
        omega = quat_to_rotvec(self.rotation)
        v = np.linalg.solve(_left_jacobian(omega), self.translation)
        return np.concatenate([v, omega])

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    @property
    def t(self) -> np.ndarray:
        return self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        q = quat_mul(self.rotation, other.rotation)
        return PoseSE3(q, self.R @ other.translation + self.translation)

    __matmul__ = compose

    def inverse(self) -> "PoseSE3":
        q = self.rotation * np.array([1.0, -1.0, -1.0, -1.0])
        return PoseSE3(q, -(quat_to_rotmat(q) @ self.translation))

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.R.T + self.translation

    def rotate(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.R.T

    def angle_to(self, other: "PoseSE3") -> float:
        """Rotation angle (radians) of ``self^-1 * other``."""
        d = self.inverse().compose(other)
        return float(np.linalg.norm(quat_to_rotvec(d.rotation)))

    def distance_to(self, other: "PoseSE3") -> float:
        return float(np.linalg.norm(self.translation - other.translation))

    def __repr__(self):
        q = np.array2string(self.rotation, precision=6)
        t = np.array2string(self.translation, precision=6)
        return f"PoseSE3(q={q}, t={t})"


# ---------------------------------------------------------------------------
# Gaussian primitive
# ---------------------------------------------------------------------------

def covariances(quats, log_scales):
    """Batched R diag(exp(2 s)) R^T."""
    R = quat_to_rotmat(quats)
    s2 = np.exp(2.0 * np.asarray(log_scales, dtype=np.float64))
    return (R * s2[..., None, :]) @ np.swapaxes(R, -1, -2)


def smallest_axes(quats, log_scales, hints=None):
    """Unit eigen-axis of the smallest scale per primitive, oriented by ``hints``."""
    R = quat_to_rotmat(quats)
    log_scales = np.asarray(log_scales, dtype=np.float64)
    k = np.argmin(log_scales, axis=-1)
    n = np.take_along_axis(R, k[..., None, None].repeat(3, axis=-2), axis=-1)[..., 0]
    if hints is not None:
        flip = np.sum(n * hints, axis=-1) < 0
        n = np.where(flip[..., None], -n, n)
    return n


@dataclass(frozen=True)
class GaussianPrimitive:
    """One anisotropic Gaussian: mean, orientation, log std-devs, opacity, color.

    ``normal_hint`` stores the direction toward the observing sensor at
    creation time; ``normal()`` flips the smallest axis to agree with it.
    """

    mean: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    log_scales: np.ndarray = field(default_factory=lambda: np.zeros(3))
    opacity: float = 0.5
    color: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))
    reliable: bool = True
    birth_frame: int = 0
    normal_hint: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sky: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64).reshape(3))
        object.__setattr__(self, "rotation", normalize_quat(np.asarray(self.rotation, dtype=np.float64).reshape(4)))
        ls = np.maximum(np.asarray(self.log_scales, dtype=np.float64).reshape(3), LOG_SCALE_FLOOR)
        object.__setattr__(self, "log_scales", ls)
        object.__setattr__(self, "color", np.asarray(self.color, dtype=np.float64).reshape(3))
        object.__setattr__(self, "normal_hint", np.asarray(self.normal_hint, dtype=np.float64).reshape(3))
        object.__setattr__(self, "opacity", float(self.opacity))

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def covariance(self) -> np.ndarray:
        return covariance_of(self)

    def normal(self) -> np.ndarray:
        return smallest_axes(self.rotation, self.log_scales, self.normal_hint)

    def transformed(self, pose: PoseSE3) -> "GaussianPrimitive":
        return replace(
            self,
            mean=pose.apply(self.mean),
            rotation=quat_mul(pose.rotation, self.rotation),
            normal_hint=pose.rotate(self.normal_hint),
        )


def covariance_of(g: GaussianPrimitive) -> np.ndarray:
    S = covariances(g.rotation, g.log_scales)
    return 0.5 * (S + S.T)


def gaussian_eval(g: GaussianPrimitive, x) -> float:
    """exp(-1/2 (x - mu)^T Sigma^-1 (x - mu)), via the rotated frame."""
    R = quat_to_rotmat(g.rotation)
    local = R.T @ (np.asarray(x, dtype=np.float64) - g.mean)
    m = np.sum((local / g.scales) ** 2)
    return float(np.exp(-0.5 * m))


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics plus the LiDAR-to-camera extrinsic ``T_cam_lidar``."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    T_cam_lidar: PoseSE3 = field(default_factory=PoseSE3)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def world_to_camera(self, pose: PoseSE3) -> PoseSE3:
        """Transform taking world points into this camera, given the rig pose."""
        return self.T_cam_lidar.compose(pose.inverse())

    def camera_pose(self, pose: PoseSE3) -> PoseSE3:
        return pose.compose(self.T_cam_lidar.inverse())

    def project(self, pts_cam):
        """Pixel coordinates (u, v) and depth z for camera-frame points."""
        pts_cam = np.asarray(pts_cam, dtype=np.float64)
        z = pts_cam[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pts_cam[..., 0] / z + self.cx
            v = self.fy * pts_cam[..., 1] / z + self.cy
        return u, v, z

    def pixel_index(self, u, v):
        """Nearest pixel (col, row) for projected coordinates; pixel centers are integers."""
        return np.floor(u + 0.5).astype(np.int64), np.floor(v + 0.5).astype(np.int64)

    def backproject(self, col, row, depth):
        x = (np.asarray(col, dtype=np.float64) - self.cx) / self.fx * depth
        y = (np.asarray(row, dtype=np.float64) - self.cy) / self.fy * depth
        return np.stack([x, y, np.asarray(depth, dtype=np.float64)], axis=-1)

    def with_size(self, width: int, height: int) -> "CameraModel":
        return replace(self, width=width, height=height)


# LiDAR frame is x-forward / y-left / z-up; camera is x-right / y-down / z-forward.
LIDAR_TO_CAMERA_ROTATION = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


def default_extrinsic(offset=(0.0, 0.0, 0.0)) -> PoseSE3:
    return PoseSE3.from_rt(LIDAR_TO_CAMERA_ROTATION, offset)
