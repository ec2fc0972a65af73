"""Point-to-point ICP, the rigid baseline for scene flow."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .errors import InvalidInputError, RegistrationError
from .geometry import RigidTransform, as_points, static_flow
from .neighbors import SpatialIndex


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 50
    convergence_delta: float = 1e-6
    max_correspondence_distance: float = 2.0

    def __post_init__(self):
        if self.max_iterations < 1 or self.convergence_delta <= 0 or self.max_correspondence_distance <= 0:
            raise InvalidInputError("ICP parameters must be positive")


@dataclass
class IcpResult:
    transform: RigidTransform
    rms: float
    iterations: int
    # RMS distance of the gated correspondences found at each iteration,
    # measured before that iteration's alignment.
    rms_history: List[float] = field(default_factory=list)

    def __iter__(self):
        return iter((self.transform, self.rms, self.iterations))


def _spread(points) -> bool:
    """True if the points are not all (nearly) on one line."""
    sv = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    return sv[0] > 0 and sv[1] > sv[0] * 1e-12


def best_rigid_transform(src, dst) -> RigidTransform:
    """Least-squares rotation and translation taking ``src`` onto ``dst`` (Kabsch).

    Raises :class:`RegistrationError` for fewer than 3 pairs or a
    cross-covariance of rank below 2.
    """
    src, dst = as_points(src), as_points(dst)
    if len(src) < 3:
        raise RegistrationError(f"need at least 3 correspondences, got {len(src)}")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, S, Vt = np.linalg.svd(H)
    if S[0] <= 0 or S[1] <= S[0] * 1e-12:
        raise RegistrationError("degenerate correspondence set (rank-deficient cross-covariance)")
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    # Re-orthonormalize against accumulated rounding.
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    return RigidTransform(R, mu_d - R @ mu_s)


def icp_register(source, target, cfg: IcpConfig = IcpConfig(), init: RigidTransform | None = None) -> IcpResult:
    """Align ``source`` to ``target``; the transform maps source coordinates to target coordinates."""
    src, tgt = as_points(source), as_points(target)
    if len(src) < 3 or len(tgt) < 3:
        raise RegistrationError("ICP needs at least 3 points in each cloud")
    if not (_spread(src) and _spread(tgt)):
        raise RegistrationError("ICP needs non-collinear clouds")
    index = SpatialIndex(tgt)
    T = init or RigidTransform.identity()
    gate = cfg.max_correspondence_distance**2
    history: List[float] = []
    rms = math.inf
    for it in range(1, cfg.max_iterations + 1):
        moved = T.apply(src)
        ids, sq = index.nearest_many(moved)
        keep = sq <= gate
        if keep.sum() < 3:
            raise RegistrationError(f"only {int(keep.sum())} correspondences within {cfg.max_correspondence_distance} m")
        current = math.sqrt(math.fsum(sq[keep].tolist()) / keep.sum())
        history.append(current)
        if current == 0.0:
            # Already aligned; the closed-form update would only add rounding.
            rms = 0.0
            break
        T = best_rigid_transform(src[keep], tgt[ids[keep]])
        d = T.apply(src[keep]) - tgt[ids[keep]]
        rms = math.sqrt(math.fsum(np.einsum("ij,ij->i", d, d).tolist()) / keep.sum())
        if current <= cfg.convergence_delta or (it > 1 and history[-2] - current < cfg.convergence_delta):
            break
    return IcpResult(T, rms, it, history)


def icp_flow(source, transform: RigidTransform) -> np.ndarray:
    """Rigid flow ``(R p + t) - p`` of every source point."""
    return static_flow(source, transform)
