"""Deterministic synthetic RGB-D frame pairs with exact ground truth.

Scenes are made of analytic primitives (boxes, spheres, planes) ray-cast
with a z-buffer; there is no rasterization, so rendered depths are exact
to floating-point precision. World coordinates are the first camera's
frame. ``camera_motion`` maps first-camera coordinates to second-camera
coordinates, and each object moves rigidly by its own ``motion``
(expressed in world coordinates) between the two frames.

The ground-truth flow of a first-frame surface point ``p`` on an object
with motion ``M`` is ``C(M(p)) - p`` where ``C`` is the camera motion:
the point's position seen from the second camera minus its position seen
from the first.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InvalidInputError
from .geometry import PIXEL_TOL, CameraIntrinsics, DepthMap, PointCloud, RigidTransform, unproject

VISIBILITY_RTOL = 1e-7


def rotation_deg(rx=0.0, ry=0.0, rz=0.0) -> np.ndarray:
    """Rotation matrix from extrinsic x-y-z Euler angles in degrees."""
    return Rotation.from_euler("xyz", [rx, ry, rz], degrees=True).as_matrix()


def motion_about(center, translation=(0.0, 0.0, 0.0), rotation=None) -> RigidTransform:
    """Rigid motion rotating about ``center`` then translating."""
    c = np.asarray(center, dtype=np.float64)
    R = np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)
    return RigidTransform(R, c - R @ c + np.asarray(translation, dtype=np.float64))


@dataclass
class Box:
    center: Sequence[float]
    half_size: Sequence[float]
    rotation: Optional[np.ndarray] = None
    # Seen from inside (room walls): the exit point of the ray is the hit.
    inside: bool = False

    def intersect(self, origin, dirs):
        R = np.eye(3) if self.rotation is None else np.asarray(self.rotation)
        o = R.T @ (np.asarray(origin) - np.asarray(self.center, dtype=np.float64))
        d = dirs @ R
        h = np.asarray(self.half_size, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-h - o) / d
            t2 = (h - o) / d
        lo = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2)).max(axis=1)
        hi = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2)).min(axis=1)
        hit = hi >= np.maximum(lo, 0.0)
        s = np.where(self.inside, hi, np.where(lo > 0, lo, np.inf))
        return np.where(hit & (s > 0), s, np.inf)

    def local(self, points):
        R = np.eye(3) if self.rotation is None else np.asarray(self.rotation)
        return (points - np.asarray(self.center, dtype=np.float64)) @ R


@dataclass
class Sphere:
    center: Sequence[float]
    radius: float

    def intersect(self, origin, dirs):
        oc = np.asarray(origin) - np.asarray(self.center, dtype=np.float64)
        a = np.einsum("ij,ij->i", dirs, dirs)
        b = 2.0 * dirs @ oc
        c = oc @ oc - self.radius**2
        disc = b * b - 4 * a * c
        root = np.sqrt(np.maximum(disc, 0.0))
        s_near = (-b - root) / (2 * a)
        s_far = (-b + root) / (2 * a)
        s = np.where(s_near > 0, s_near, s_far)
        return np.where((disc >= 0) & (s > 0), s, np.inf)

    def local(self, points):
        return points - np.asarray(self.center, dtype=np.float64)


@dataclass
class Plane:
    point: Sequence[float]
    normal: Sequence[float]

    def intersect(self, origin, dirs):
        n = np.asarray(self.normal, dtype=np.float64)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (np.asarray(self.point, dtype=np.float64) - origin) @ n / denom
        return np.where((denom != 0) & (s > 0), s, np.inf)

    def local(self, points):
        return points - np.asarray(self.point, dtype=np.float64)


Primitive = Union[Box, Sphere, Plane]


@dataclass
class SceneObject:
    shape: Primitive
    motion: RigidTransform = field(default_factory=RigidTransform.identity)
    color: Sequence[float] = (0.8, 0.8, 0.8)
    checker: float = 0.0

    @property
    def moves(self) -> bool:
        return not self.motion.is_identity()


@dataclass
class SceneSpec:
    width: int
    height: int
    intrinsics: CameraIntrinsics
    objects: List[SceneObject]
    camera_motion: RigidTransform = field(default_factory=RigidTransform.identity)
    noise_sigma: float = 0.0
    seed: int = 0
    background: Optional[SceneObject] = None

    def __post_init__(self):
        if self.width < 2 or self.height < 2:
            raise InvalidInputError("image must be at least 2x2 pixels")
        if self.noise_sigma < 0:
            raise InvalidInputError("noise_sigma must be >= 0")
        for i, obj in enumerate(self.objects):
            c = np.asarray(obj.shape.center, dtype=np.float64) if hasattr(obj.shape, "center") else None
            if c is None:
                continue
            c2 = self.camera_motion.apply(obj.motion.apply(c))[0]
            if c[2] <= 0 or c2[2] <= 0:
                raise InvalidInputError(f"object {i} is not in front of the camera in both frames")

    @property
    def all_objects(self) -> List[SceneObject]:
        return ([self.background] if self.background is not None else []) + list(self.objects)


@dataclass
class RenderResult:
    depth1: DepthMap
    depth2: DepthMap
    image1: np.ndarray
    image2: np.ndarray
    gt_flow: np.ndarray
    gt_pose: RigidTransform
    occlusion_mask: np.ndarray
    out_of_view: np.ndarray
    object_ids: np.ndarray
    moving_mask: np.ndarray
    pc1_exact: PointCloud

    @property
    def occluded_in_view(self) -> np.ndarray:
        """First-frame points inside the second image but hidden there."""
        return self.occlusion_mask & ~self.out_of_view


def _pixel_rays(spec: SceneSpec) -> np.ndarray:
    v, u = np.mgrid[0 : spec.height, 0 : spec.width]
    return spec.intrinsics.rays(u.ravel().astype(np.float64), v.ravel().astype(np.float64))


def _cast(objects: Sequence[SceneObject], to_object_frames: Sequence[RigidTransform], dirs: np.ndarray):
    """Nearest hit along rays from the camera center.

    Returns ``(s, object id, hit point in the object's first-frame
    coordinates)``; rays have unit z, so ``s`` is the depth.
    """
    best = np.full(len(dirs), np.inf)
    ids = np.full(len(dirs), -1, dtype=np.intp)
    for j, (obj, T) in enumerate(zip(objects, to_object_frames)):
        s = obj.shape.intersect(T.translation, dirs @ T.rotation.T)
        closer = s < best
        best[closer] = s[closer]
        ids[closer] = j
    world = np.zeros((len(dirs), 3))
    for j, T in enumerate(to_object_frames):
        m = ids == j
        if m.any():
            world[m] = T.apply(best[m, None] * dirs[m])
    return best, ids, world


def _shade(objects, ids, world):
    img = np.zeros((len(ids), 3))
    for j, obj in enumerate(objects):
        m = ids == j
        if not m.any():
            continue
        col = np.broadcast_to(np.asarray(obj.color, dtype=np.float64), (m.sum(), 3)).copy()
        if obj.checker > 0:
            loc = obj.shape.local(world[m])
            parity = np.floor(loc / obj.checker).astype(np.int64).sum(axis=1) % 2
            col *= np.where(parity == 0, 1.0, 0.55)[:, None]
        img[m] = col
    return img


def render(spec: SceneSpec) -> RenderResult:
    """Render both frames, ground-truth flow and visibility of a scene."""
    objects = spec.all_objects
    if not objects:
        raise InvalidInputError("scene has no geometry")
    C = spec.camera_motion
    h, w = spec.height, spec.width
    dirs = _pixel_rays(spec)
    frames1 = [RigidTransform.identity() for _ in objects]
    frames2 = [(C @ obj.motion).inverse() for obj in objects]
    s1, id1, world1 = _cast(objects, frames1, dirs)
    s2, id2, world2 = _cast(objects, frames2, dirs)
    if not np.isfinite(s1).any():
        raise InvalidInputError("no geometry is visible in the first frame")
    hit1 = np.isfinite(s1)
    z1 = np.where(hit1, s1, 0.0).reshape(h, w)
    z2 = np.where(np.isfinite(s2), s2, 0.0).reshape(h, w)
    image1 = _shade(objects, id1, world1).reshape(h, w, 3)
    image2 = _shade(objects, id2, world2).reshape(h, w, 3)

    pc1 = unproject(DepthMap(z1), spec.intrinsics, image1)
    obj_ids = id1[hit1]
    flow = np.empty_like(pc1.points)
    q = np.empty_like(pc1.points)
    for j, obj in enumerate(objects):
        m = obj_ids == j
        q[m] = (C @ obj.motion).apply(pc1.points[m])
    flow = q - pc1.points

    K = spec.intrinsics
    qz = q[:, 2]
    front = qz > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u2 = np.where(front, K.fx * q[:, 0] / qz + K.cx, np.nan)
        v2 = np.where(front, K.fy * q[:, 1] / qz + K.cy, np.nan)
        tol = PIXEL_TOL
        out = ~(front & (u2 >= -tol) & (u2 <= w - 1 + tol) & (v2 >= -tol) & (v2 <= h - 1 + tol))
    visible = np.zeros(len(q), dtype=bool)
    look = ~out
    if look.any():
        rays = q[look] / qz[look, None]
        s, ids, _ = _cast(objects, frames2, rays)
        visible[look] = (ids == obj_ids[look]) & (np.abs(s - qz[look]) <= VISIBILITY_RTOL * np.maximum(1.0, qz[look]))

    moving = np.array([objects[j].moves for j in obj_ids], dtype=bool)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        for z in (z1, z2):
            m = z > 0
            z[m] = np.maximum(z[m] + rng.normal(0.0, spec.noise_sigma, m.sum()), 1e-6)
    return RenderResult(
        DepthMap(z1), DepthMap(z2), image1, image2, flow, C,
        ~visible, out, obj_ids, moving, pc1,
    )


# -- presets -----------------------------------------------------------------


def default_intrinsics(width=64, height=48) -> CameraIntrinsics:
    return CameraIntrinsics(fx=0.9 * width, fy=0.9 * width, cx=(width - 1) / 2, cy=(height - 1) / 2)


def moving_box_scene(width=80, height=60, box_motion=(0.3, 0.0, -0.4), camera_motion=None,
                     noise_sigma=0.0, seed=0) -> SceneSpec:
    """Textured background wall and ground with a box moving independently."""
    K = default_intrinsics(width, height)
    box = SceneObject(
        Box(center=(0.4, 0.1, 4.0), half_size=(0.55, 0.45, 0.5), rotation=rotation_deg(0, 25, 0)),
        motion_about((0.4, 0.1, 4.0), box_motion, rotation_deg(0, 10, 0)),
        color=(0.9, 0.3, 0.2), checker=0.25,
    )
    ball = SceneObject(Sphere(center=(-1.3, -0.4, 5.5), radius=0.6), color=(0.2, 0.4, 0.9), checker=0.3)
    room = SceneObject(Box(center=(0.0, -1.0, 4.0), half_size=(6.0, 2.0, 4.5), inside=True), color=(0.7, 0.7, 0.6), checker=0.5)
    cam = camera_motion or RigidTransform(rotation_deg(0, 1.0, 0), (0.02, 0.0, -0.1))
    return SceneSpec(width, height, K, [box, ball], cam, noise_sigma, seed, background=room)


def static_scene(width=64, height=48, camera_motion=None, noise_sigma=0.0, seed=0) -> SceneSpec:
    """The moving-box layout with every object at rest; only the camera moves."""
    spec = moving_box_scene(width, height, camera_motion=camera_motion, noise_sigma=noise_sigma, seed=seed)
    for obj in spec.objects:
        obj.motion = RigidTransform.identity()
    return spec


def aligned_card_scene(width=64, height=48, shift_px=(4, 0), depth=3.0, object_moves=True) -> SceneSpec:
    """Fronto-parallel card with no background, displaced by a whole number of pixels.

    The card straddles the optical axis in both frames, so only its front
    face is ever visible and every first-frame pixel lands exactly on a
    second-frame pixel. ``object_moves`` selects whether the card moves or
    the camera does.
    """
    K = default_intrinsics(width, height)
    dx = shift_px[0] * depth / K.fx
    dy = shift_px[1] * depth / K.fy
    card = Box(center=(0.0, 0.0, depth + 0.1), half_size=(0.55 * depth * width / (2 * K.fx), 0.55 * depth * height / (2 * K.fy), 0.1))
    # Keep card edges off pixel centers.
    card.half_size = tuple(np.asarray(card.half_size) + [0.37 * depth / K.fx, 0.37 * depth / K.fy, 0.0])
    if object_moves:
        obj = SceneObject(card, RigidTransform(np.eye(3), (dx, dy, 0.0)), color=(0.8, 0.6, 0.2), checker=0.2)
        return SceneSpec(width, height, K, [obj])
    obj = SceneObject(card, color=(0.8, 0.6, 0.2), checker=0.2)
    return SceneSpec(width, height, K, [obj], RigidTransform(np.eye(3), (dx, dy, 0.0)))


PRESETS = {
    "moving_box": moving_box_scene,
    "static": static_scene,
    "aligned_card": aligned_card_scene,
}
