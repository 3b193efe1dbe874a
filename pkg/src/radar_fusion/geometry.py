"""Projection of radar-frame points into image pixel and normalized coordinates.

The camera model is the KITTI-style chain

    c'_img = T_intr (3x4) . T_r2c (4x4) . [p; 1]

with (u, v) = (c'_img.x / d, c'_img.y / d) and d = c'_img.z the depth.
Normalized coordinates are (u / W, v / H); a point is in view when its
depth is positive and its pixel lies in [0, W) x [0, H).

Points whose depth is (numerically) zero are never divided through: they
get the sentinel pixel INVALID_PIXEL and valid=False. Points behind the
camera are flagged out of view and later sample a zero image feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from radar_fusion.errors import ContractError, DimensionError

DEPTH_EPS = 1e-9
INVALID_PIXEL = (-1.0, -1.0)


@dataclass(frozen=True, eq=False)
class CalibrationSet:
    """Camera intrinsics, radar-to-camera extrinsics and image size."""

    intrinsic: np.ndarray
    radar_to_camera: np.ndarray
    image_size: tuple[int, int]

    def __post_init__(self) -> None:
        intr = np.asarray(self.intrinsic, dtype=np.float64)
        r2c = np.asarray(self.radar_to_camera, dtype=np.float64)
        if intr.shape != (3, 4):
            raise DimensionError(f"intrinsic must be 3x4, got {intr.shape}")
        if r2c.shape != (4, 4):
            raise DimensionError(f"radar_to_camera must be 4x4, got {r2c.shape}")
        if not np.array_equal(r2c[3], [0.0, 0.0, 0.0, 1.0]):
            raise ContractError(f"radar_to_camera bottom row must be (0,0,0,1), got {r2c[3]}")
        if not np.array_equal(intr[2], [0.0, 0.0, 1.0, 0.0]):
            raise ContractError(f"intrinsic row 3 must be (0,0,1,0), got {intr[2]}")
        w, h = self.image_size
        if int(w) <= 0 or int(h) <= 0:
            raise ContractError(f"image size must be positive, got {self.image_size}")
        object.__setattr__(self, "intrinsic", intr)
        object.__setattr__(self, "radar_to_camera", r2c)
        object.__setattr__(self, "image_size", (int(w), int(h)))

    @property
    def projection(self) -> np.ndarray:
        """Combined 3x4 matrix T_intr . T_r2c."""
        return self.intrinsic @ self.radar_to_camera

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        """Rigidly transform radar-frame points (N x 3) into the camera frame."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return pts @ self.radar_to_camera[:3, :3].T + self.radar_to_camera[:3, 3]

    def to_radar(self, points: np.ndarray) -> np.ndarray:
        """Inverse of to_camera."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        rot = self.radar_to_camera[:3, :3]
        return (pts - self.radar_to_camera[:3, 3]) @ np.linalg.inv(rot).T


@dataclass(frozen=True)
class ProjectedPoint:
    """Projection of a single radar point."""

    pixel: tuple[float, float]
    normalized: tuple[float, float]
    depth: float
    in_view: bool
    valid: bool = True


@dataclass(frozen=True, eq=False)
class Projection:
    """Vectorized projection of N points (row i belongs to input point i)."""

    pixel: np.ndarray       # N x 2
    normalized: np.ndarray  # N x 2
    depth: np.ndarray       # N
    in_view: np.ndarray     # N bool
    valid: np.ndarray       # N bool, False where |depth| < DEPTH_EPS

    def __len__(self) -> int:
        return int(self.depth.shape[0])


def normalize(pixel: np.ndarray, image_size: tuple[int, int]) -> np.ndarray:
    """Pixel (u, v) -> (u / W, v / H)."""
    w, h = image_size
    return np.asarray(pixel, dtype=np.float64) / np.array([w, h], dtype=np.float64)


def denormalize(normalized: np.ndarray, image_size: tuple[int, int]) -> np.ndarray:
    """Normalized (x, y) -> pixel (x * W, y * H)."""
    w, h = image_size
    return np.asarray(normalized, dtype=np.float64) * np.array([w, h], dtype=np.float64)


def project_points(points: np.ndarray, calib: CalibrationSet) -> Projection:
    """Project radar-frame points (N x 3, meters) into the image."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] < 3:
        raise DimensionError(f"points must be N x 3, got {pts.shape}")
    n = pts.shape[0]
    homo = np.concatenate([pts[:, :3], np.ones((n, 1))], axis=1)
    cam = homo @ calib.projection.T  # N x 3: (u d, v d, d)
    depth = cam[:, 2]
    valid = np.abs(depth) >= DEPTH_EPS

    pixel = np.empty((n, 2), dtype=np.float64)
    pixel[:] = INVALID_PIXEL
    pixel[valid] = cam[valid, :2] / depth[valid, None]
    w, h = calib.image_size
    in_view = (
        valid
        & (depth > 0)
        & (pixel[:, 0] >= 0)
        & (pixel[:, 0] < w)
        & (pixel[:, 1] >= 0)
        & (pixel[:, 1] < h)
    )
    return Projection(
        pixel=pixel,
        normalized=normalize(pixel, calib.image_size),
        depth=depth,
        in_view=in_view,
        valid=valid,
    )


def project_point(p: np.ndarray, calib: CalibrationSet) -> ProjectedPoint:
    """Project one radar-frame point (3-vector, meters)."""
    proj = project_points(np.asarray(p, dtype=np.float64).reshape(1, 3), calib)
    return ProjectedPoint(
        pixel=(float(proj.pixel[0, 0]), float(proj.pixel[0, 1])),
        normalized=(float(proj.normalized[0, 0]), float(proj.normalized[0, 1])),
        depth=float(proj.depth[0]),
        in_view=bool(proj.in_view[0]),
        valid=bool(proj.valid[0]),
    )


def rotation_z(yaw: float) -> np.ndarray:
    """3x3 rotation about the z (up) axis."""
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def default_radar_to_camera(translation: tuple[float, float, float] = (0.0, 0.0, 0.0)) -> np.ndarray:
    """Radar frame (x fwd, y left, z up) to camera frame (x right, y down, z fwd)."""
    r2c = np.eye(4)
    r2c[:3, :3] = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
    r2c[:3, 3] = translation
    return r2c


def pinhole_intrinsic(focal: float, cx: float, cy: float) -> np.ndarray:
    """3x4 intrinsic matrix with square pixels and no skew."""
    return np.array([[focal, 0.0, cx, 0.0], [0.0, focal, cy, 0.0], [0.0, 0.0, 1.0, 0.0]])
