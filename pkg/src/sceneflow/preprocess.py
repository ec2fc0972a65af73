"""Point-cloud cleanup before flow estimation.

Three filters, applied by :func:`preprocess` in this order:

1. ground and sky: drop points lower than ``min_height_above_ground``
   above the road (height measured as ``camera_height - y`` with y pointing
   down) and points farther than ``max_depth``;
2. sensor range: drop points farther than ``range_limit`` from the camera;
3. occlusion: drop first-frame points hidden in the second frame.

Every filter returns the kept cloud and the strictly increasing input
indices of the kept points.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .errors import InvalidInputError
from .geometry import CameraIntrinsics, DepthMap, PointCloud, RigidTransform, project
from .losses import bilinear_depth


@dataclass(frozen=True)
class PreprocessConfig:
    min_height_above_ground: float = 1.15
    max_depth: float = 35.0
    camera_height: float = 1.65
    range_limit: float = 80.0
    occlusion_tolerance: float = 0.5

    def __post_init__(self):
        for f in fields(self):
            val = getattr(self, f.name)
            if not (np.isfinite(val) and val > 0):
                raise InvalidInputError(f"{f.name} must be positive, got {val}")


def _keep(cloud: PointCloud, mask):
    idx = np.flatnonzero(mask)
    return cloud.subset(idx), idx


def crop_ground_sky(cloud: PointCloud, cfg: PreprocessConfig = PreprocessConfig()):
    pts = cloud.points
    height = cfg.camera_height - pts[:, 1]
    return _keep(cloud, (height >= cfg.min_height_above_ground) & (pts[:, 2] <= cfg.max_depth))


def crop_range(cloud: PointCloud, cfg: PreprocessConfig = PreprocessConfig()):
    pts = cloud.points
    return _keep(cloud, np.sqrt(np.sum(pts**2, axis=1)) <= cfg.range_limit)


def occlusion_mask(cloud1: PointCloud, pose: RigidTransform, depth2: DepthMap, intrinsics: CameraIntrinsics,
                   cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """True for points whose camera-warped depth lies behind the second depth map.

    Points that land outside the image or on invalid depth are not flagged.
    """
    warped = pose.apply(cloud1.points)
    uvz, in_front = project(warped, intrinsics)
    d_hat, ok = bilinear_depth(depth2, uvz[:, 0], uvz[:, 1])
    ok = ok & in_front
    return ok & (uvz[:, 2] > np.where(ok, d_hat, np.inf) + cfg.occlusion_tolerance)


def remove_occluded(cloud1: PointCloud, pose: RigidTransform, depth2: DepthMap, intrinsics: CameraIntrinsics,
                    cfg: PreprocessConfig = PreprocessConfig()):
    return _keep(cloud1, ~occlusion_mask(cloud1, pose, depth2, intrinsics, cfg))


def preprocess(cloud: PointCloud, cfg: PreprocessConfig = PreprocessConfig(), pose: Optional[RigidTransform] = None,
               depth2: Optional[DepthMap] = None, intrinsics: Optional[CameraIntrinsics] = None):
    """Run the filters in pipeline order; occlusion removal needs ``pose``,
    ``depth2`` and ``intrinsics`` and is skipped when they are absent."""
    out, kept = crop_ground_sky(cloud, cfg)
    out, k2 = crop_range(out, cfg)
    kept = kept[k2]
    given = [x is not None for x in (pose, depth2, intrinsics)]
    if any(given) and not all(given):
        raise InvalidInputError("occlusion removal needs pose, depth2 and intrinsics together")
    if all(given):
        out, k3 = remove_occluded(out, pose, depth2, intrinsics, cfg)
        kept = kept[k3]
    return out, kept
