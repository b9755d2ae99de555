"""Pinhole projection, calibration handling and oriented-box geometry.

Frames follow the KITTI convention: the rectified camera frame has x to the
right, y down and z forward; box yaw is a rotation about camera y.  LiDAR
points are mapped into that frame through ``lidar_to_cam`` then ``rect``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import NonPositiveDepth

TWO_PI = 2.0 * math.pi


def wrap_angle(a):
    """Wrap radians to [-pi, pi). Works on scalars and arrays."""
    if np.ndim(a) == 0:
        r = math.fmod(float(a) + math.pi, TWO_PI)
        if r < 0.0:
            r += TWO_PI
        r -= math.pi
        if r >= math.pi:
            r -= TWO_PI
        return r
    arr = np.asarray(a, dtype=np.float64)
    r = np.mod(arr + math.pi, TWO_PI) - math.pi
    return np.where(r >= math.pi, r - TWO_PI, r)


def rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotate_y(xyz: np.ndarray, angle: float) -> np.ndarray:
    """Apply ``rot_y(angle)`` to the first three columns of ``xyz``."""
    xyz = np.asarray(xyz, dtype=np.float64)
    out = xyz.copy()
    out[..., :3] = xyz[..., :3] @ rot_y(angle).T
    return out


@dataclass
class ProjectionMatrix:
    """Camera projection ``p`` plus optional rectification and LiDAR extrinsic."""

    p: np.ndarray
    rect: np.ndarray | None = None
    lidar_to_cam: np.ndarray | None = None

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64).reshape(3, 4)
        if self.rect is not None:
            self.rect = np.asarray(self.rect, dtype=np.float64).reshape(3, 3)
        if self.lidar_to_cam is not None:
            self.lidar_to_cam = np.asarray(self.lidar_to_cam, dtype=np.float64).reshape(3, 4)
        if np.linalg.matrix_rank(self.p) < 3:
            raise ValueError("projection matrix must have rank 3")

    @classmethod
    def from_intrinsics(cls, fx: float, fy: float, cx: float, cy: float, **kw) -> "ProjectionMatrix":
        p = np.array([[fx, 0.0, cx, 0.0], [0.0, fy, cy, 0.0], [0.0, 0.0, 1.0, 0.0]])
        return cls(p, **kw)

    def to_camera(self, xyz: np.ndarray) -> np.ndarray:
        """Map (N, 3) sensor points into the rectified camera frame."""
        xyz = np.asarray(xyz, dtype=np.float64)[..., :3]
        if self.lidar_to_cam is not None:
            xyz = xyz @ self.lidar_to_cam[:, :3].T + self.lidar_to_cam[:, 3]
        if self.rect is not None:
            xyz = xyz @ self.rect.T
        return xyz

    def from_camera(self, xyz: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`to_camera`."""
        xyz = np.asarray(xyz, dtype=np.float64)[..., :3]
        if self.rect is not None:
            xyz = np.linalg.solve(self.rect, xyz.T).T
        if self.lidar_to_cam is not None:
            r, t = self.lidar_to_cam[:, :3], self.lidar_to_cam[:, 3]
            xyz = np.linalg.solve(r, (xyz - t).T).T
        return xyz

    def composed(self) -> np.ndarray:
        """Single 3x4 matrix ``P @ R0 @ Tr`` acting on homogeneous sensor points."""
        m = np.eye(4)
        if self.lidar_to_cam is not None:
            m[:3, :] = self.lidar_to_cam
        if self.rect is not None:
            r = np.eye(4)
            r[:3, :3] = self.rect
            m = r @ m
        return self.p @ m

    def project_camera(self, xyz_cam: np.ndarray) -> np.ndarray:
        """Project rectified-camera points; no depth filtering."""
        xyz_cam = np.asarray(xyz_cam, dtype=np.float64)
        h = xyz_cam @ self.p[:, :3].T + self.p[:, 3]
        return h[..., :2] / h[..., 2:3]


def project_point(p, proj: ProjectionMatrix) -> tuple[float, float]:
    cam = proj.to_camera(np.asarray(p, dtype=np.float64)[None, :3])[0]
    if not cam[2] > 0.0:
        raise NonPositiveDepth(f"point at camera depth {cam[2]:.6g} is not in front of the camera")
    u, v = proj.project_camera(cam[None])[0]
    return float(u), float(v)


class ProjectedCloud(NamedTuple):
    indices: np.ndarray  # (K,) indices into the input
    pixels: np.ndarray  # (K, 2)
    camera_xyz: np.ndarray  # (K, 3) rectified camera coordinates
    dropped: int


def project_cloud(points, proj: ProjectionMatrix) -> ProjectedCloud:
    """Project every point with positive camera depth, preserving input order."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return ProjectedCloud(np.zeros(0, dtype=np.int64), np.zeros((0, 2)), np.zeros((0, 3)), 0)
    cam = proj.to_camera(pts[:, :3])
    keep = np.flatnonzero(cam[:, 2] > 0.0)
    pix = proj.project_camera(cam[keep])
    return ProjectedCloud(keep, pix, cam[keep], int(len(pts) - len(keep)))


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned image box stored as center and size, in pixels."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"Box2D needs positive size, got w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box2D":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    @property
    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box: geometric center (camera frame), l/w/h and yaw about y.

    ``l`` runs along camera x at yaw 0, ``w`` along z and ``h`` along y.
    """

    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    yaw: float = 0.0
    label: str = field(default="", compare=True)

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"Box3D needs positive size, got {(self.l, self.w, self.h)}")
        for name in ("x", "y", "z", "l", "w", "h", "yaw"):
            v = float(getattr(self, name))
            if not math.isfinite(v):
                raise ValueError(f"Box3D.{name} must be finite")
            object.__setattr__(self, name, v)
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def size(self) -> np.ndarray:
        return np.array([self.l, self.w, self.h])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.l, self.w, self.h, self.yaw])

    @classmethod
    def from_array(cls, a, label: str = "") -> "Box3D":
        x, y, z, l, w, h, yaw = (float(v) for v in a[:7])
        return cls(x, y, z, l, w, h, yaw, label)


# corner template: bottom face (y = +h/2, camera y points down) first, then top
_CORNER_SIGNS = np.array(
    [
        [1, 1, 1],
        [1, 1, -1],
        [-1, 1, -1],
        [-1, 1, 1],
        [1, -1, 1],
        [1, -1, -1],
        [-1, -1, -1],
        [-1, -1, 1],
    ],
    dtype=np.float64,
)


def box3d_corners(b: Box3D) -> np.ndarray:
    """Eight corners (8, 3) in a fixed order: bottom face then top face."""
    half = np.array([b.l, b.h, b.w]) / 2.0
    local = _CORNER_SIGNS * half
    return local @ rot_y(b.yaw).T + b.center


def bev_corners(b: Box3D) -> np.ndarray:
    """Ground-plane footprint as (4, 2) array of (x, z), counter-clockwise in (x, z)."""
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    hl, hw = b.l / 2.0, b.w / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    x = local[:, 0] * c + local[:, 1] * s + b.x
    z = -local[:, 0] * s + local[:, 1] * c + b.z
    pts = np.stack([x, z], axis=1)
    # enforce counter-clockwise orientation for polygon clipping
    area = 0.5 * np.sum(pts[:, 0] * np.roll(pts[:, 1], -1) - np.roll(pts[:, 0], -1) * pts[:, 1])
    return pts if area > 0 else pts[::-1].copy()


def points_in_box3d(xyz: np.ndarray, b: Box3D, margin: float = 0.0) -> np.ndarray:
    """Boolean mask of points inside ``b`` inflated by ``margin`` on every side."""
    xyz = np.asarray(xyz, dtype=np.float64)[..., :3]
    local = (xyz - b.center) @ rot_y(b.yaw)
    half = np.array([b.l, b.h, b.w]) / 2.0 + margin
    return np.all(np.abs(local) <= half, axis=-1)


def point_in_box2d(pixel, b: Box2D) -> bool:
    u, v = pixel
    return bool(abs(u - b.cx) <= b.w / 2.0 and abs(v - b.cy) <= b.h / 2.0)


def points_in_box2d(pixels: np.ndarray, b: Box2D) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    return (np.abs(pixels[:, 0] - b.cx) <= b.w / 2.0) & (np.abs(pixels[:, 1] - b.cy) <= b.h / 2.0)


def project_box3d(b: Box3D, proj: ProjectionMatrix) -> np.ndarray:
    """Pixel coordinates (8, 2) of the box corners; ``b`` is in the camera frame."""
    corners = box3d_corners(b)
    if np.any(corners[:, 2] <= 0.0):
        raise NonPositiveDepth("box has corners behind the camera")
    return proj.project_camera(corners)


def box2d_from_box3d(b: Box3D, proj: ProjectionMatrix, image_w: int | None = None, image_h: int | None = None) -> Box2D:
    """Hull of the projected corners, optionally clipped to the image bounds."""
    uv = project_box3d(b, proj)
    x1, y1 = uv.min(axis=0)
    x2, y2 = uv.max(axis=0)
    if image_w is not None:
        x1, x2 = max(x1, 0.0), min(x2, image_w - 1.0)
    if image_h is not None:
        y1, y2 = max(y1, 0.0), min(y2, image_h - 1.0)
    return Box2D.from_corners(float(x1), float(y1), float(x2), float(y2))
