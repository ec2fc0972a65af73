"""Pinhole camera model, depth-map/point-cloud conversion and rigid motion.

Camera frame convention: x right, y down, z forward. Rigid transforms use
the column-vector form ``p' = R @ p + t``; pose files written in the
row-vector form ``p' = p @ R + t`` must be transposed when read.

Flow fields are plain ``(N, 3)`` float arrays index-aligned with the
cloud they were computed for.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import InvalidInputError

RIGID_TOL = 1e-9
# Reprojected pixel coordinates may overshoot the image border by rounding.
PIXEL_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(np.isfinite(vals)):
            raise InvalidInputError(f"intrinsics must be finite, got {vals}")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def rays(self, u, v) -> np.ndarray:
        """Unnormalized viewing rays ``K^-1 (u, v, 1)`` (unit z component)."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)


@dataclass(frozen=True)
class DepthMap:
    """Dense depth in meters, shape ``(height, width)``.

    Pixels with depth <= 0 or non-finite depth are invalid (16-bit depth
    images store 0 for "no measurement").
    """

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise InvalidInputError(f"depth map must be 2-D, got shape {vals.shape}")
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_flat(cls, width: int, height: int, values) -> "DepthMap":
        vals = np.asarray(values, dtype=np.float64)
        if vals.size != width * height:
            raise InvalidInputError(f"expected {width * height} depth values, got {vals.size}")
        return cls(vals.reshape(height, width))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def valid(self) -> np.ndarray:
        v = self.values
        return np.isfinite(v) & (v > 0)


@dataclass(frozen=True)
class PointCloud:
    """3-D points in a camera frame with optional colors and pixel provenance.

    ``colors`` are RGB in [0, 1]; ``source_pixels`` are the ``(u, v)`` pixel
    coordinates a point was unprojected from.
    """

    points: np.ndarray
    colors: Optional[np.ndarray] = None
    source_pixels: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        for name in ("colors", "source_pixels"):
            arr = getattr(self, name)
            if arr is None:
                continue
            width = 3 if name == "colors" else 2
            arr = np.asarray(arr, dtype=np.float64).reshape(-1, width)
            if len(arr) != len(pts):
                raise InvalidInputError(f"{name} has {len(arr)} rows, cloud has {len(pts)} points")
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, indices) -> "PointCloud":
        idx = np.asarray(indices, dtype=np.intp)
        return PointCloud(
            self.points[idx],
            None if self.colors is None else self.colors[idx],
            None if self.source_pixels is None else self.source_pixels[idx],
        )

    def with_points(self, points) -> "PointCloud":
        return replace(self, points=points)

    def __add__(self, flow) -> "PointCloud":
        flow = check_flow(flow, len(self))
        return self.with_points(self.points + flow)


def as_points(cloud) -> np.ndarray:
    """Coordinates of a PointCloud, or an array-like coerced to ``(N, 3)``."""
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64).reshape(-1, 3)


def check_flow(flow, n: Optional[int] = None) -> np.ndarray:
    arr = np.asarray(flow, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise InvalidInputError(f"flow must have shape (N, 3), got {arr.shape}")
    if n is not None and len(arr) != n:
        raise InvalidInputError(f"flow has {len(arr)} vectors, cloud has {n} points")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("flow vectors must be finite")
    return arr


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise InvalidInputError(f"bad transform shapes {R.shape}, {t.shape}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidInputError("transform must be finite")
        if np.abs(R.T @ R - np.eye(3)).max() > RIGID_TOL or abs(np.linalg.det(R) - 1.0) > RIGID_TOL:
            raise InvalidInputError("rotation is not orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, mat) -> "RigidTransform":
        """From a 3x4 ``[R|t]`` or 4x4 homogeneous matrix."""
        mat = np.asarray(mat, dtype=np.float64)
        return cls(mat[:3, :3], mat[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def apply(self, points) -> np.ndarray:
        pts = as_points(points)
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.rotation, np.eye(3)) and not self.translation.any())


def unproject(depth: DepthMap, intrinsics: CameraIntrinsics, image=None) -> PointCloud:
    """Lift every valid depth pixel to a 3-D point, in row-major pixel order.

    ``image`` is an optional ``(H, W, 3)`` RGB array in [0, 1] whose colors
    are attached to the points.
    """
    h, w = depth.values.shape
    if image is not None:
        image = np.asarray(image, dtype=np.float64)
        if image.shape[:2] != (h, w):
            raise InvalidInputError(f"image shape {image.shape[:2]} does not match depth shape {(h, w)}")
    vs, us = np.nonzero(depth.valid)
    z = depth.values[vs, us]
    u = us.astype(np.float64)
    v = vs.astype(np.float64)
    pts = np.stack([(u - intrinsics.cx) * z / intrinsics.fx, (v - intrinsics.cy) * z / intrinsics.fy, z], axis=1)
    colors = None if image is None else image[vs, us, :3]
    return PointCloud(pts, colors, np.stack([u, v], axis=1))


def project(cloud, intrinsics: CameraIntrinsics):
    """Project points to ``(u, v, depth)`` rows plus a validity mask.

    Points with ``z <= 0`` get NaN pixel coordinates and ``valid=False``; the
    output stays index-aligned with the input.
    """
    pts = as_points(cloud)
    z = pts[:, 2]
    valid = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(valid, intrinsics.fx * pts[:, 0] / z + intrinsics.cx, np.nan)
        v = np.where(valid, intrinsics.fy * pts[:, 1] / z + intrinsics.cy, np.nan)
    return np.stack([u, v, z], axis=1), valid


def apply_transform(cloud: PointCloud, pose: RigidTransform) -> PointCloud:
    if pose.is_identity():
        return cloud
    return cloud.with_points(pose.apply(cloud.points))


def static_flow(cloud, pose: RigidTransform) -> np.ndarray:
    """Displacement ``(R p + t) - p`` induced by camera motion alone."""
    pts = as_points(cloud)
    return pose.apply(pts) - pts


def farthest_point_order(points, count: int, seed_index: int = 0, tie_rtol: float = 1e-9) -> np.ndarray:
    """Greedy farthest-point ordering of ``count`` point ids starting at ``seed_index``.

    Candidates within ``tie_rtol`` (relative) of the largest remaining
    distance count as tied and the smallest id wins, so lattice-like
    clouds give the same ordering regardless of rounding noise. Any prefix
    of the result is itself an FPS subset.
    """
    pts = as_points(points)
    n = len(pts)
    count = min(count, n)
    order = np.empty(count, dtype=np.intp)
    if count == 0:
        return order
    order[0] = seed_index
    d = np.sum((pts - pts[seed_index]) ** 2, axis=1)
    for i in range(1, count):
        nxt = int(np.argmax(d >= d.max() * (1 - tie_rtol)))
        order[i] = nxt
        d = np.minimum(d, np.sum((pts - pts[nxt]) ** 2, axis=1))
    return order
