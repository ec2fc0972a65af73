"""Unsupervised scene-flow losses and their analytic gradients.

Every loss is a sum over points (not a mean). The discrete structure of
each loss (bilinear interpolation cell, nearest-neighbor assignments,
Laplacian neighborhoods, inverse-distance footprints) can be computed once
and passed back in *frozen*; with frozen structure each loss is a smooth
function of the point positions and the ``*_grad`` functions return its
exact gradient.

Reductions use :func:`math.fsum`, so totals are independent of
evaluation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidInputError
from .geometry import PIXEL_TOL, CameraIntrinsics, DepthMap, as_points, check_flow
from .neighbors import SpatialIndex, sqdist

IDW_EPS = 1e-9
DEFAULT_K = 9


def _fsum_sq(residuals) -> float:
    r = np.asarray(residuals)
    return math.fsum(sqdist(r, 0.0).tolist()) if r.size else 0.0


# -- bilinear depth --------------------------------------------------------


@dataclass(frozen=True)
class Footprint:
    """Bilinear interpolation cell per query: top-left corner and validity."""

    i1: np.ndarray
    j1: np.ndarray
    valid: np.ndarray


def depth_footprint(depth: DepthMap, u, v) -> Footprint:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    h, w = depth.values.shape
    if w < 2 or h < 2:
        raise InvalidInputError("bilinear interpolation needs a depth map of at least 2x2 pixels")
    with np.errstate(invalid="ignore"):
        tol = PIXEL_TOL
        inside = np.isfinite(u) & np.isfinite(v) & (u >= -tol) & (u <= w - 1 + tol) & (v >= -tol) & (v <= h - 1 + tol)
    uu = np.where(inside, u, 0.0)
    vv = np.where(inside, v, 0.0)
    i1 = np.clip(np.floor(uu).astype(np.intp), 0, w - 2)
    j1 = np.clip(np.floor(vv).astype(np.intp), 0, h - 2)
    ok = depth.valid
    corners = ok[j1, i1] & ok[j1, i1 + 1] & ok[j1 + 1, i1] & ok[j1 + 1, i1 + 1]
    return Footprint(i1, j1, inside & corners)


def _bilinear_in_cell(depth: DepthMap, u, v, fp: Footprint, derivatives=False):
    D = depth.values
    i1, j1 = fp.i1, fp.j1
    i2, j2 = i1 + 1, j1 + 1
    d11, d21 = D[j1, i1], D[j1, i2]
    d12, d22 = D[j2, i1], D[j2, i2]
    # Cell width is one pixel, so the normalizers of the general formula are 1.
    a, b = i2 - u, u - i1
    c, e = j2 - v, v - j1
    val = d11 * a * c + d21 * b * c + d12 * a * e + d22 * b * e
    if not derivatives:
        return val
    du = (d21 - d11) * c + (d22 - d12) * e
    dv = (d12 - d11) * a + (d22 - d21) * b
    return val, du, dv


def bilinear_depth(depth: DepthMap, u, v):
    """Bilinearly interpolated depth at sub-pixel ``(u, v)``.

    ``u`` indexes columns and ``v`` rows. Returns ``(value, valid)``; the
    value is NaN where invalid (outside ``[0, W-1] x [0, H-1]`` or any of
    the four corner pixels has invalid depth). Accepts scalars or arrays.
    """
    scalar = np.ndim(u) == 0 and np.ndim(v) == 0
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    fp = depth_footprint(depth, u, v)
    val = np.where(fp.valid, _bilinear_in_cell(depth, np.where(fp.valid, u, 0.0), np.where(fp.valid, v, 0.0), fp), np.nan)
    if scalar:
        return float(val[0]), bool(fp.valid[0])
    return val, fp.valid


# -- depth consistency -----------------------------------------------------


@dataclass
class DepthTerm:
    loss: float
    residuals: np.ndarray
    valid: np.ndarray
    footprint: Footprint

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())


def _project_uv(q, K: CameraIntrinsics):
    z = q[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * q[:, 0] / z + K.cx
        v = K.fy * q[:, 1] / z + K.cy
    return u, v, z


def depth_consistency(flowed, depth2: DepthMap, intrinsics: CameraIntrinsics, footprint: Optional[Footprint] = None) -> DepthTerm:
    """Distance between flowed points and their re-lifted interpolated depths.

    Each flowed point is projected into the second image, the second depth
    map is bilinearly interpolated there, and the pixel is lifted back to
    3-D with that depth. Points behind the camera, outside the image or on
    invalid depth are masked out. Passing ``footprint`` freezes the
    interpolation cell and mask.
    """
    q = as_points(flowed)
    u, v, z = _project_uv(q, intrinsics)
    in_front = z > 0
    if footprint is None:
        footprint = depth_footprint(depth2, np.where(in_front, u, np.nan), np.where(in_front, v, np.nan))
    valid = footprint.valid & in_front
    uu = np.where(valid, u, 0.0)
    vv = np.where(valid, v, 0.0)
    d_hat = _bilinear_in_cell(depth2, uu, vv, footprint)
    relifted = d_hat[:, None] * intrinsics.rays(uu, vv)
    residuals = np.where(valid[:, None], q - relifted, 0.0)
    return DepthTerm(_fsum_sq(residuals), residuals, valid, footprint)


def depth_consistency_grad(flowed, depth2: DepthMap, intrinsics: CameraIntrinsics, footprint: Footprint) -> np.ndarray:
    """Gradient of :func:`depth_consistency` w.r.t. the flowed points.

    The residual equals ``s * q`` with ``s = 1 - D_hat(q) / q_z``.
    """
    q = as_points(flowed)
    u, v, z = _project_uv(q, intrinsics)
    valid = footprint.valid & (z > 0)
    grad = np.zeros_like(q)
    if not valid.any():
        return grad
    qv, uv, vv, zv = q[valid], u[valid], v[valid], z[valid]
    fp = Footprint(footprint.i1[valid], footprint.j1[valid], footprint.valid[valid])
    d_hat, d_du, d_dv = _bilinear_in_cell(depth2, uv, vv, fp, derivatives=True)
    fx, fy = intrinsics.fx, intrinsics.fy
    grad_dhat = np.stack(
        [d_du * fx / zv, d_dv * fy / zv, -(d_du * fx * qv[:, 0] + d_dv * fy * qv[:, 1]) / zv**2],
        axis=1,
    )
    s = 1.0 - d_hat / zv
    ds = -grad_dhat / zv[:, None]
    ds[:, 2] += d_hat / zv**2
    qq = sqdist(qv, 0.0)
    grad[valid] = 2.0 * s[:, None] * (s[:, None] * qv + qq[:, None] * ds)
    return grad


# -- dynamic/static consistency --------------------------------------------


def ds_consistency(overall, static, dynamic):
    """Sum of ``||overall - (static + dynamic)||^2``; returns ``(loss, residuals)``."""
    o = check_flow(overall)
    s = check_flow(static, len(o))
    d = check_flow(dynamic, len(o))
    # Grouped as (o - s) - d so dynamic = overall - static gives exactly zero.
    r = (o - s) - d
    return _fsum_sq(r), r


def ds_consistency_grad(overall, static, dynamic):
    """Gradients ``(d/d overall, d/d dynamic)``."""
    _, r = ds_consistency(overall, static, dynamic)
    return 2.0 * r, -2.0 * r


# -- Chamfer ---------------------------------------------------------------


@dataclass
class ChamferTerm:
    loss: float
    a_to_b: np.ndarray
    a_sq: np.ndarray
    b_to_a: np.ndarray
    b_sq: np.ndarray


def chamfer(a, b, index_b: Optional[SpatialIndex] = None, index_a: Optional[SpatialIndex] = None) -> ChamferTerm:
    """Symmetric sum of squared nearest-neighbor distances between two clouds."""
    pa, pb = as_points(a), as_points(b)
    if len(pa) == 0 or len(pb) == 0:
        raise InvalidInputError("chamfer distance needs two non-empty clouds")
    index_b = index_b or SpatialIndex(pb)
    index_a = index_a or SpatialIndex(pa)
    a_to_b, a_sq = index_b.nearest_many(pa)
    b_to_a, b_sq = index_a.nearest_many(pb)
    return ChamferTerm(math.fsum(a_sq.tolist() + b_sq.tolist()), a_to_b, a_sq, b_to_a, b_sq)


def chamfer_frozen(a, b, a_to_b, b_to_a) -> float:
    pa, pb = as_points(a), as_points(b)
    return _fsum_sq(np.vstack([pa - pb[a_to_b], pa[b_to_a] - pb]))


def chamfer_grad(a, b, a_to_b, b_to_a) -> np.ndarray:
    """Gradient of the frozen Chamfer sum w.r.t. the points of ``a``."""
    pa, pb = as_points(a), as_points(b)
    grad = 2.0 * (pa - pb[a_to_b])
    back = 2.0 * (pa[b_to_a] - pb)
    for c in range(3):
        grad[:, c] += np.bincount(b_to_a, weights=back[:, c], minlength=len(pa))
    return grad


# -- Laplacian coordinates and IDW -----------------------------------------


def laplacian_from_neighbors(points, neighbors) -> np.ndarray:
    """Mean offset ``(1/k) sum_j (p_j - p_i)`` over given neighbor ids."""
    pts = as_points(points)
    nbr = np.asarray(neighbors, dtype=np.intp)
    k = nbr.shape[1]
    acc = np.zeros_like(pts)
    for j in range(k):
        acc += pts[nbr[:, j]] - pts
    return acc / k


def laplacian_coords(cloud, index: Optional[SpatialIndex] = None, k: int = DEFAULT_K, return_neighbors=False):
    """Laplacian coordinate of every point over its k nearest other points."""
    pts = as_points(cloud)
    if len(pts) <= k:
        raise InvalidInputError(f"Laplacian coordinates need more than k={k} points, got {len(pts)}")
    index = index or SpatialIndex(pts)
    nbr, _ = index.query_excluding_self(k)
    gamma = laplacian_from_neighbors(pts, nbr)
    return (gamma, nbr) if return_neighbors else gamma


def _idw_from_footprint(ids, sq, values):
    """Inverse-distance blend per row; rows with a coincident point take its value."""
    dist = np.sqrt(sq)
    guard = dist < IDW_EPS
    hit = guard.any(axis=1)
    with np.errstate(divide="ignore"):
        w = np.where(guard, 0.0, 1.0 / np.where(guard, 1.0, dist))
    num = np.zeros((len(ids), values.shape[1]))
    den = np.zeros(len(ids))
    for j in range(ids.shape[1]):
        num += w[:, j, None] * values[ids[:, j]]
        den += w[:, j]
    out = np.empty_like(num)
    out[~hit] = num[~hit] / den[~hit, None]
    # Rows are sorted by distance, so the first guarded column is the nearest.
    first = guard.argmax(axis=1)
    out[hit] = values[ids[hit, first[hit]]]
    return out, hit


def idw_interpolate_many(queries, data_cloud, data_values, index: Optional[SpatialIndex] = None, k: int = DEFAULT_K) -> np.ndarray:
    q = as_points(queries)
    vals = np.asarray(data_values, dtype=np.float64)
    data = as_points(data_cloud)
    if len(vals) != len(data):
        raise InvalidInputError("data_values must be aligned with data_cloud")
    index = index or SpatialIndex(data)
    ids, sq = index.query(q, k)
    out, _ = _idw_from_footprint(ids, sq, vals.reshape(len(vals), -1))
    return out.reshape((len(q),) + vals.shape[1:])


def idw_interpolate(query, data_cloud, data_values, index: Optional[SpatialIndex] = None, k: int = DEFAULT_K) -> np.ndarray:
    """Inverse-distance weighted mean of the values at the k nearest data points.

    Weights are ``1/d``. If a data point lies within 1e-9 m of the query,
    the value of the nearest such point is returned unchanged.
    """
    return idw_interpolate_many(np.reshape(query, (1, 3)), data_cloud, data_values, index, k)[0]


@dataclass
class LaplacianStructure:
    """Frozen discrete structure of the Laplacian regularizer."""

    neighbors: np.ndarray
    idw_ids: np.ndarray
    guard: np.ndarray
    target_laplacian: np.ndarray


@dataclass
class LaplacianTerm:
    loss: float
    residuals: np.ndarray
    structure: LaplacianStructure


def laplacian_structure(flowed, target, k: int = DEFAULT_K, target_index: Optional[SpatialIndex] = None,
                        target_laplacian: Optional[np.ndarray] = None) -> LaplacianStructure:
    a, b = as_points(flowed), as_points(target)
    if len(a) <= k or len(b) <= k:
        raise InvalidInputError(f"Laplacian regularization needs more than k={k} points in both clouds")
    target_index = target_index or SpatialIndex(b)
    if target_laplacian is None:
        target_laplacian = laplacian_coords(b, target_index, k)
    nbr, _ = SpatialIndex(a).query_excluding_self(k)
    ids, sq = target_index.query(a, k)
    guard = np.sqrt(sq) < IDW_EPS
    return LaplacianStructure(nbr, ids, guard, target_laplacian)


def _laplacian_parts(a, b, st: LaplacianStructure):
    gamma_a = laplacian_from_neighbors(a, st.neighbors)
    sq = sqdist(a[:, None, :], b[st.idw_ids])
    # Guard decisions are part of the frozen structure.
    sq = np.where(st.guard, 0.0, np.maximum(sq, IDW_EPS**2))
    gamma_bar, _ = _idw_from_footprint(st.idw_ids, sq, st.target_laplacian)
    return gamma_a, gamma_bar


def laplacian_reg(flowed, target, k: int = DEFAULT_K, structure: Optional[LaplacianStructure] = None, **kw) -> LaplacianTerm:
    """Squared mismatch between the flowed cloud's Laplacian coordinates and
    the target's, the latter interpolated onto the flowed points."""
    a, b = as_points(flowed), as_points(target)
    st = structure or laplacian_structure(a, b, k, **kw)
    gamma_a, gamma_bar = _laplacian_parts(a, b, st)
    r = gamma_a - gamma_bar
    return LaplacianTerm(_fsum_sq(r), r, st)


def laplacian_reg_grad(flowed, target, structure: LaplacianStructure) -> np.ndarray:
    a, b = as_points(flowed), as_points(target)
    st = structure
    gamma_a, gamma_bar = _laplacian_parts(a, b, st)
    r = gamma_a - gamma_bar
    n, k = st.neighbors.shape
    grad = -2.0 * r
    spread = 2.0 * r / k
    for c in range(3):
        for j in range(k):
            grad[:, c] += np.bincount(st.neighbors[:, j], weights=spread[:, c], minlength=n)
    live = ~st.guard.any(axis=1)
    if live.any():
        ids = st.idw_ids[live]
        diff = a[live, None, :] - b[ids]
        dist = np.sqrt(sqdist(diff, 0.0))
        w = 1.0 / dist
        W = w.sum(axis=1)
        dw = -diff / dist[..., None] ** 3
        coef = np.einsum("nkc,nc->nk", st.target_laplacian[ids] - gamma_bar[live, None, :], r[live])
        grad[live] -= 2.0 * np.einsum("nk,nkl->nl", coef, dw) / W[:, None]
    return grad


# -- combined objective ----------------------------------------------------


@dataclass
class LossWeights:
    alpha: Sequence[float] = (0.02, 0.04, 0.08, 0.16)
    beta1: float = 0.1
    beta2: float = 0.1
    beta3: float = 1.0
    beta4: float = 0.3

    def __post_init__(self):
        self.alpha = tuple(float(a) for a in self.alpha)
        vals = self.alpha + (self.beta1, self.beta2, self.beta3, self.beta4)
        if not self.alpha or any(not np.isfinite(x) or x < 0 for x in vals):
            raise InvalidInputError(f"loss weights must be non-negative and finite, got {vals}")

    @property
    def levels(self) -> int:
        return len(self.alpha)

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(self.alpha, self.beta1 * factor, self.beta2 * factor, self.beta3 * factor, self.beta4 * factor)


@dataclass
class LossBreakdown:
    depth1: float = 0.0
    depth2: float = 0.0
    ds: float = 0.0
    chamfer: float = 0.0
    laplacian: float = 0.0
    total: float = 0.0
    n_points: int = 0
    n_target: int = 0
    n_depth1_valid: int = 0
    n_depth2_valid: int = 0

    @classmethod
    def combine(cls, weights: LossWeights, alpha: float, **parts) -> "LossBreakdown":
        out = cls(**parts)
        out.total = alpha * (
            weights.beta1 * (out.depth1 + out.depth2)
            + weights.beta2 * out.ds
            + weights.beta3 * out.chamfer
            + weights.beta4 * out.laplacian
        )
        return out

    def means(self) -> dict:
        n = max(self.n_points, 1)
        return {
            "depth1_mean": self.depth1 / max(self.n_depth1_valid, 1),
            "depth2_mean": self.depth2 / max(self.n_depth2_valid, 1),
            "ds_mean": self.ds / n,
            "chamfer_mean": self.chamfer / max(self.n_points + self.n_target, 1),
            "laplacian_mean": self.laplacian / n,
        }

    def as_record(self) -> dict:
        rec = {f.name: getattr(self, f.name) for f in fields(self)}
        rec.update(self.means())
        return rec

    def to_text(self, prefix: str = "") -> str:
        return "".join(f"{prefix}{key} {_fmt(val)}\n" for key, val in self.as_record().items())

    def first_nonfinite(self) -> Optional[str]:
        for name in ("depth1", "depth2", "ds", "chamfer", "laplacian", "total"):
            if not math.isfinite(getattr(self, name)):
                return name
        return None


def _fmt(val) -> str:
    return str(val) if isinstance(val, (int, np.integer)) else repr(float(val))


@dataclass
class LevelProblem:
    """Fixed data of one pyramid level: level points of both frames, the
    static flow of the source points and the second depth map."""

    source: np.ndarray
    target: np.ndarray
    static: np.ndarray
    depth2: DepthMap
    intrinsics: CameraIntrinsics
    k: int = DEFAULT_K
    target_index: SpatialIndex = field(init=False, repr=False)
    target_laplacian: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.source = as_points(self.source)
        self.target = as_points(self.target)
        self.static = check_flow(self.static, len(self.source))
        if len(self.source) <= self.k or len(self.target) <= self.k:
            raise InvalidInputError(
                f"level clouds need more than k={self.k} points, got {len(self.source)} and {len(self.target)}"
            )
        self.target_index = SpatialIndex(self.target)
        self.target_laplacian = laplacian_coords(self.target, self.target_index, self.k)

    def __len__(self) -> int:
        return len(self.source)


@dataclass
class LevelStructure:
    """All discrete structure of one level, frozen at a given iterate."""

    footprint1: Footprint
    footprint2: Footprint
    a_to_b: np.ndarray
    b_to_a: np.ndarray
    laplacian: LaplacianStructure


def level_structure(problem: LevelProblem, overall, dynamic) -> LevelStructure:
    a = problem.source + overall
    a2 = problem.source + problem.static + dynamic
    t1 = depth_consistency(a, problem.depth2, problem.intrinsics)
    t2 = depth_consistency(a2, problem.depth2, problem.intrinsics)
    ch = chamfer(a, problem.target, problem.target_index)
    lap = laplacian_structure(a, problem.target, problem.k, problem.target_index, problem.target_laplacian)
    return LevelStructure(t1.footprint, t2.footprint, ch.a_to_b, ch.b_to_a, lap)


def level_loss(problem: LevelProblem, overall, dynamic, weights: LossWeights, alpha: float = 1.0,
               structure: Optional[LevelStructure] = None) -> LossBreakdown:
    """Weighted loss of one level. Without ``structure`` all correspondences
    are recomputed at the given flows (the true objective)."""
    overall = check_flow(overall, len(problem))
    dynamic = check_flow(dynamic, len(problem))
    st = structure or level_structure(problem, overall, dynamic)
    a = problem.source + overall
    a2 = problem.source + problem.static + dynamic
    t1 = depth_consistency(a, problem.depth2, problem.intrinsics, st.footprint1)
    t2 = depth_consistency(a2, problem.depth2, problem.intrinsics, st.footprint2)
    ds, _ = ds_consistency(overall, problem.static, dynamic)
    cha = chamfer_frozen(a, problem.target, st.a_to_b, st.b_to_a)
    lap = laplacian_reg(a, problem.target, problem.k, st.laplacian).loss
    return LossBreakdown.combine(
        weights, alpha,
        depth1=t1.loss, depth2=t2.loss, ds=ds, chamfer=cha, laplacian=lap,
        n_points=len(problem), n_target=len(problem.target),
        n_depth1_valid=t1.n_valid, n_depth2_valid=t2.n_valid,
    )


def level_grad(problem: LevelProblem, overall, dynamic, weights: LossWeights, alpha: float,
               structure: LevelStructure):
    """Gradient of :func:`level_loss` under frozen structure.

    Returns ``(grad_overall, grad_dynamic)``.
    """
    a = problem.source + overall
    a2 = problem.source + problem.static + dynamic
    g1 = depth_consistency_grad(a, problem.depth2, problem.intrinsics, structure.footprint1)
    g2 = depth_consistency_grad(a2, problem.depth2, problem.intrinsics, structure.footprint2)
    gds_o, gds_d = ds_consistency_grad(overall, problem.static, dynamic)
    gch = chamfer_grad(a, problem.target, structure.a_to_b, structure.b_to_a)
    glap = laplacian_reg_grad(a, problem.target, structure.laplacian)
    g_overall = alpha * (weights.beta1 * g1 + weights.beta2 * gds_o + weights.beta3 * gch + weights.beta4 * glap)
    g_dynamic = alpha * (weights.beta1 * g2 + weights.beta2 * gds_d)
    return g_overall, g_dynamic


def total_loss(levels: Sequence[LevelProblem], flows, weights: LossWeights, structures=None):
    """Combined objective over all levels.

    ``flows`` holds one ``(overall, dynamic)`` pair per level. Returns the
    per-level breakdowns (each already scaled by its level factor) and
    their sum.
    """
    if len(levels) != weights.levels or len(flows) != len(levels):
        raise InvalidInputError(f"expected {weights.levels} levels, got {len(levels)} problems and {len(flows)} flows")
    structures = structures or [None] * len(levels)
    parts = [
        level_loss(p, o, d, weights, alpha, st)
        for p, (o, d), alpha, st in zip(levels, flows, weights.alpha, structures)
    ]
    return parts, math.fsum(b.total for b in parts)


def grad_total(levels: Sequence[LevelProblem], flows, weights: LossWeights, structures=None):
    """Per-level ``(grad_overall, grad_dynamic)`` of :func:`total_loss`,
    with structure frozen at ``flows`` unless given."""
    if len(levels) != weights.levels or len(flows) != len(levels):
        raise InvalidInputError(f"expected {weights.levels} levels, got {len(levels)} problems and {len(flows)} flows")
    out = []
    for i, (p, (o, d)) in enumerate(zip(levels, flows)):
        st = structures[i] if structures else level_structure(p, o, d)
        out.append(level_grad(p, o, d, weights, weights.alpha[i], st))
    return out
