"""Pinhole cameras, rigid poses and cross-view depth reprojection.

Conventions used throughout the package:

* pixel coordinate (u, v) = (column, row), origin at the top-left pixel
  center, continuous (sub-pixel) unless stated otherwise
* depth is the z-coordinate of a point in the camera frame, in meters
* poses are camera-to-world unless a parameter name says otherwise
* scaling intrinsics to pyramid level s divides fx, fy, cx, cy by s
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

# Points closer than this to the camera plane are treated as invisible.
MIN_DEPTH = 1e-9

ORTHONORMALITY_TOL = 1e-9


class GeometryError(ValueError):
    """Base class for geometric contract violations."""


class NonPositiveSourceDepth(GeometryError):
    """A projected point landed on or behind the source camera plane."""


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics with the image size they refer to."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point outside the image")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )

    def scaled(self, s: int) -> "CameraIntrinsics":
        """Intrinsics for the pyramid level at 1/s resolution."""
        return CameraIntrinsics(
            fx=self.fx / s,
            fy=self.fy / s,
            cx=self.cx / s,
            cy=self.cy / s,
            width=-(-self.width // s),
            height=-(-self.height // s),
        )


@dataclass(frozen=True)
class RigidPose:
    """Rigid transform: x_out = rotation @ x_in + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not np.allclose(R.T @ R, np.eye(3), atol=ORTHONORMALITY_TOL):
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHONORMALITY_TOL:
            raise GeometryError("rotation determinant is not +1")

    @staticmethod
    def identity() -> "RigidPose":
        return RigidPose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "RigidPose":
        m = np.asarray(m, dtype=np.float64)
        return RigidPose(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "RigidPose":
        return RigidPose(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "RigidPose") -> "RigidPose":
        """self applied after other: (self ∘ other)(x) = self(other(x))."""
        return RigidPose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply to points of shape (..., 3)."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def to_vector6(self) -> np.ndarray:
        """(tx, ty, tz, rx, ry, rz) with intrinsic-XYZ Euler angles in radians."""
        angles = Rotation.from_matrix(self.rotation).as_euler("XYZ")
        return np.concatenate([self.translation, angles])

    @staticmethod
    def from_vector6(q: np.ndarray) -> "RigidPose":
        q = np.asarray(q, dtype=np.float64).reshape(6)
        R = Rotation.from_euler("XYZ", q[3:]).as_matrix()
        return RigidPose(R, q[:3])


@dataclass(frozen=True)
class PixelCoord:
    """Continuous pixel location (column u, row v)."""

    u: float
    v: float

    def __post_init__(self):
        if not (np.isfinite(self.u) and np.isfinite(self.v)):
            raise GeometryError("pixel coordinates must be finite")


class DepthMap:
    """Dense per-pixel depth with a validity mask; invalid pixels hold 0."""

    def __init__(self, values: np.ndarray, valid: np.ndarray | None = None):
        values = np.asarray(values, dtype=np.float64)
        if valid is None:
            valid = values > 0
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != values.shape:
            raise GeometryError("valid mask shape does not match values")
        if np.any(values[valid] <= 0):
            raise GeometryError("valid depth values must be positive")
        self.values = np.where(valid, values, 0.0)
        self.valid = valid

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def copy(self) -> "DepthMap":
        return DepthMap(self.values.copy(), self.valid.copy())


class SparseDepthMap:
    """Scattered depth samples at sub-pixel locations."""

    def __init__(self, u: np.ndarray, v: np.ndarray, depth: np.ndarray):
        self.u = np.asarray(u, dtype=np.float64).reshape(-1)
        self.v = np.asarray(v, dtype=np.float64).reshape(-1)
        self.depth = np.asarray(depth, dtype=np.float64).reshape(-1)
        if not (len(self.u) == len(self.v) == len(self.depth)):
            raise GeometryError("sample arrays must have equal length")
        if np.any(self.depth <= 0):
            raise GeometryError("sample depths must be positive")

    def __len__(self) -> int:
        return len(self.depth)

    @staticmethod
    def empty() -> "SparseDepthMap":
        return SparseDepthMap(np.empty(0), np.empty(0), np.empty(0))

    def rasterize(self, width: int, height: int, scale: int = 1) -> DepthMap:
        """Grid view at 1/scale resolution; colliding samples keep the minimum depth.

        A sample at full-resolution (u, v) lands in the cell of its nearest
        pixel, integer-divided by ``scale``. Samples outside the grid are
        ignored.
        """
        gw = -(-width // scale)
        gh = -(-height // scale)
        values = np.zeros((gh, gw), dtype=np.float64)
        if len(self) == 0:
            return DepthMap(values)
        col = np.rint(self.u).astype(int) // scale
        row = np.rint(self.v).astype(int) // scale
        ok = (col >= 0) & (col < gw) & (row >= 0) & (row < gh)
        flat = np.full(gh * gw, np.inf)
        np.minimum.at(flat, row[ok] * gw + col[ok], self.depth[ok])
        grid = flat.reshape(gh, gw)
        hit = np.isfinite(grid) & (grid > 0)
        values[hit] = grid[hit]
        return DepthMap(values, hit)


def backproject(q: PixelCoord, depth: float, K: CameraIntrinsics) -> np.ndarray:
    """Lift a pixel at the given depth to a 3D point in the camera frame."""
    if depth <= 0:
        raise GeometryError("depth must be positive")
    return np.array(
        [(q.u - K.cx) / K.fx * depth, (q.v - K.cy) / K.fy * depth, depth],
        dtype=np.float64,
    )


def project_points(
    uv: np.ndarray, depth: np.ndarray, K: CameraIntrinsics, P: RigidPose
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized pinhole reprojection of target pixels into another view.

    Args:
        uv: (N, 2) sub-pixel target coordinates.
        depth: (N,) target-frame depths.
        K: intrinsics shared by both views.
        P: target-camera to source-camera transform.

    Returns:
        (uv_s, depth_s, in_front): projected (N, 2) source coordinates, the
        source-frame depths, and a mask of points in front of the source
        camera. Coordinates for masked-out points are unreliable.
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    depth = np.asarray(depth, dtype=np.float64).reshape(-1)
    x = (uv[:, 0] - K.cx) / K.fx * depth
    y = (uv[:, 1] - K.cy) / K.fy * depth
    pts = np.stack([x, y, depth], axis=1)
    cam = P.transform(pts)
    z = cam[:, 2]
    in_front = z > MIN_DEPTH
    zs = np.where(in_front, z, 1.0)
    us = K.fx * cam[:, 0] / zs + K.cx
    vs = K.fy * cam[:, 1] / zs + K.cy
    return np.stack([us, vs], axis=1), z, in_front


def project_point(
    q_t: PixelCoord, depth: float, K: CameraIntrinsics, P: RigidPose
) -> tuple[PixelCoord, float]:
    """Project one target pixel into the source view.

    Raises:
        NonPositiveSourceDepth: the point lies on or behind the source camera.
    """
    if depth <= 0:
        raise GeometryError("depth must be positive")
    uv_s, z, ok = project_points(np.array([[q_t.u, q_t.v]]), np.array([depth]), K, P)
    if not ok[0]:
        raise NonPositiveSourceDepth(f"source depth {z[0]:.3g} <= {MIN_DEPTH}")
    return PixelCoord(uv_s[0, 0], uv_s[0, 1]), float(z[0])


def reproject_sparse_depth(
    src: SparseDepthMap, P_src_to_tgt: RigidPose, K: CameraIntrinsics
) -> tuple[SparseDepthMap, int]:
    """Carry sparse samples from the source view into the target view.

    Samples projecting behind the target camera or outside the image bounds
    are dropped silently; the number of dropped samples is returned.
    """
    if len(src) == 0:
        return SparseDepthMap.empty(), 0
    uv = np.stack([src.u, src.v], axis=1)
    uv_t, z_t, in_front = project_points(uv, src.depth, K, P_src_to_tgt)
    inside = (
        (uv_t[:, 0] > -0.5)
        & (uv_t[:, 0] < K.width - 0.5)
        & (uv_t[:, 1] > -0.5)
        & (uv_t[:, 1] < K.height - 0.5)
    )
    keep = in_front & inside
    dropped = int(np.count_nonzero(~keep))
    return SparseDepthMap(uv_t[keep, 0], uv_t[keep, 1], z_t[keep]), dropped
