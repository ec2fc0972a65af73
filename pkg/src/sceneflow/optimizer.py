"""Direct coarse-to-fine minimization of the unsupervised objective.

Instead of training a network, the overall and dynamic flow fields of the
first cloud are free variables. A pyramid of nested farthest-point subsets
is optimized from the coarsest level to the full cloud; each level's
result is carried to the next level by inverse-distance interpolation.

Within a level, correspondences are recomputed at every accepted iterate
and frozen while the gradient is evaluated. A trial step is accepted only
if the objective with freshly recomputed correspondences decreases, so
the recorded loss never increases within a level.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, fields, replace
from typing import Any, Callable, List, Optional, Tuple

import numpy as np

from .errors import InvalidInputError, NumericalError
from .geometry import CameraIntrinsics, DepthMap, RigidTransform, as_points, farthest_point_order, static_flow
from .neighbors import SpatialIndex
from .losses import (
    DEFAULT_K,
    LevelProblem,
    LossBreakdown,
    LossWeights,
    idw_interpolate_many,
    level_grad,
    level_loss,
    level_structure,
)

log = logging.getLogger(__name__)


@dataclass
class OptimizerConfig:
    levels: int = 4
    level_sample_factor: float = 4.0
    iterations_per_level: int = 200
    initial_step: float = 1e-2
    grad_tolerance: float = 1e-6
    weights: LossWeights = field(default_factory=LossWeights)
    neighbor_k: int = DEFAULT_K
    # Per-coordinate scaling: decay of the running mean of squared gradients.
    rms_decay: float = 0.9
    step_growth: float = 1.5
    max_halvings: int = 20

    def __post_init__(self):
        if self.levels < 1 or self.iterations_per_level < 1:
            raise InvalidInputError("levels and iterations_per_level must be >= 1")
        if self.level_sample_factor <= 1:
            raise InvalidInputError("level_sample_factor must be > 1")
        if self.initial_step <= 0 or self.grad_tolerance < 0 or self.neighbor_k < 1:
            raise InvalidInputError("initial_step must be > 0, grad_tolerance >= 0, neighbor_k >= 1")
        if not 0 <= self.rms_decay < 1 or self.step_growth < 1 or self.max_halvings < 0:
            raise InvalidInputError("rms_decay must be in [0, 1), step_growth >= 1, max_halvings >= 0")
        if self.weights.levels != self.levels:
            raise InvalidInputError(f"{self.weights.levels} level factors given for {self.levels} levels")


# -- the update rule -------------------------------------------------------


@dataclass
class StepState:
    """Iterate of the adaptive first-order method.

    ``params`` is a tuple of arrays, ``loss`` the objective there and
    ``aux`` whatever the objective returned alongside it.
    """

    params: Tuple[np.ndarray, ...]
    loss: float
    step_size: float
    max_step: float
    moments: Optional[Tuple[np.ndarray, ...]] = None
    t: int = 0
    aux: Any = None
    stalled: bool = False
    halvings: int = 0


Objective = Callable[[Tuple[np.ndarray, ...]], Tuple[float, Any]]


def initial_state(params, objective: Objective, step_size: float) -> StepState:
    params = tuple(np.asarray(p, dtype=np.float64) for p in params)
    loss, aux = objective(params)
    return StepState(params, loss, step_size, step_size, aux=aux)


def step(state: StepState, gradients, objective: Objective, rms_decay=0.9, step_growth=1.5,
         max_halvings=20, eps=1e-12) -> StepState:
    """One backtracking step along the RMS-scaled negative gradient.

    The step size is halved until the objective strictly decreases; after
    ``max_halvings`` failed halvings the returned state is ``stalled`` and
    otherwise identical to the input. A zero gradient returns the state
    unchanged.
    """
    grads = tuple(np.asarray(g, dtype=np.float64) for g in gradients)
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise NumericalError("gradient")
    if not any(g.any() for g in grads):
        return state
    t = state.t + 1
    prev = state.moments or tuple(np.zeros_like(g) for g in grads)
    moments = tuple(rms_decay * m + (1 - rms_decay) * g * g for m, g in zip(prev, grads))
    correction = 1 - rms_decay**t
    directions = tuple(g / (np.sqrt(m / correction) + eps) for g, m in zip(grads, moments))
    eta = state.step_size
    for halvings in range(max_halvings + 1):
        trial = tuple(p - eta * d for p, d in zip(state.params, directions))
        loss, aux = objective(trial)
        if loss < state.loss:
            return StepState(trial, loss, min(eta * step_growth, state.max_step), state.max_step,
                             moments, t, aux, False, halvings)
        eta *= 0.5
    return replace(state, stalled=True, halvings=max_halvings)


# -- coarse-to-fine estimation --------------------------------------------


@dataclass
class TraceEntry:
    level: int
    iteration: int
    breakdown: LossBreakdown


@dataclass
class FlowEstimate:
    overall: np.ndarray
    dynamic: np.ndarray
    static: np.ndarray
    loss_trace: List[TraceEntry]
    level_assignments: List[np.ndarray]
    target_assignments: List[np.ndarray] = field(default_factory=list)

    def trace_csv(self) -> str:
        names = [f.name for f in fields(LossBreakdown)]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["iteration", "level"] + names)
        for e in self.loss_trace:
            writer.writerow([e.iteration, e.level] + [repr(getattr(e.breakdown, n)) for n in names])
        return buf.getvalue()


def level_sizes(n: int, levels: int, factor: float, minimum: int) -> List[int]:
    """Point counts per level, coarsest first; the finest level is all ``n``."""
    sizes = []
    for lvl in range(levels):
        shrink = factor ** (levels - 1 - lvl)
        sizes.append(min(n, max(minimum, int(round(n / shrink)))))
    return sizes


def pyramid(points, levels: int, factor: float, minimum: int, seed_index: int = 0) -> List[np.ndarray]:
    """Nested sorted point-id subsets, coarsest first, cut from one FPS ordering."""
    pts = as_points(points)
    sizes = level_sizes(len(pts), levels, factor, minimum)
    coarse = max(sizes[:-1], default=0)
    order = farthest_point_order(pts, coarse, seed_index) if coarse else np.empty(0, dtype=np.intp)
    out = [np.sort(order[:s]) for s in sizes[:-1]]
    out.append(np.arange(len(pts)))
    return out


def level_pyramids(pc1, pc2, static, levels: int, factor: float, k: int = DEFAULT_K):
    """Pyramid point ids for both frames.

    The first frame is seeded at point 0 and the second at the point
    nearest to where the camera motion carries that seed, so coarse levels
    of the two frames sample the same surfaces.
    """
    p1, p2 = as_points(pc1), as_points(pc2)
    ids1 = pyramid(p1, levels, factor, k + 2)
    seed2, _ = SpatialIndex(p2).nearest(p1[0] + static[0])
    ids2 = pyramid(p2, levels, factor, k + 2, seed2)
    return ids1, ids2


def level_problems(pc1, pc2, static, depth2: DepthMap, intrinsics: CameraIntrinsics, levels: int,
                   factor: float, k: int = DEFAULT_K):
    """One :class:`LevelProblem` per level, coarsest first, plus the ids used."""
    p1, p2 = as_points(pc1), as_points(pc2)
    ids1, ids2 = level_pyramids(p1, p2, static, levels, factor, k)
    problems = [LevelProblem(p1[a], p2[b], static[a], depth2, intrinsics, k) for a, b in zip(ids1, ids2)]
    return problems, ids1, ids2


def _level_objective(problem: LevelProblem, weights: LossWeights, alpha: float) -> Objective:
    def objective(params):
        overall, dynamic = params
        st = level_structure(problem, overall, dynamic)
        b = level_loss(problem, overall, dynamic, weights, alpha, st)
        bad = b.first_nonfinite()
        if bad:
            raise NumericalError(bad)
        return b.total, (b, st)

    return objective


def estimate_flow(pc1, pc2, depth2: DepthMap, intrinsics: CameraIntrinsics, pose: RigidTransform,
                  cfg: Optional[OptimizerConfig] = None) -> FlowEstimate:
    """Estimate per-point overall and dynamic flow of ``pc1`` towards ``pc2``.

    Starts from the camera-induced flow (overall = static, dynamic = 0).
    """
    cfg = cfg or OptimizerConfig()
    p1, p2 = as_points(pc1), as_points(pc2)
    k = cfg.neighbor_k
    if len(p1) == 0 or len(p2) == 0:
        raise InvalidInputError("estimate_flow needs two non-empty clouds")
    if len(p1) <= k or len(p2) <= k:
        raise InvalidInputError(f"clouds need more than neighbor_k={k} points")
    static_full = static_flow(p1, pose)
    ids1, ids2 = level_pyramids(p1, p2, static_full, cfg.levels, cfg.level_sample_factor, k)
    weights = cfg.weights
    trace: List[TraceEntry] = []
    overall = dynamic = prev_ids = None
    for lvl, (sel1, sel2) in enumerate(zip(ids1, ids2)):
        problem = LevelProblem(p1[sel1], p2[sel2], static_full[sel1], depth2, intrinsics, k)
        if prev_ids is None:
            overall = problem.static.copy()
            dynamic = np.zeros_like(overall)
        else:
            # Carry the non-rigid part; the static flow is exact at every point.
            carried = np.hstack([overall - static_full[prev_ids], dynamic])
            vals = idw_interpolate_many(p1[sel1], p1[prev_ids], carried, k=min(k, len(prev_ids)))
            overall = problem.static + vals[:, :3]
            dynamic = vals[:, 3:]
        objective = _level_objective(problem, weights, weights.alpha[lvl])
        state = initial_state((overall, dynamic), objective, cfg.initial_step)
        trace.append(TraceEntry(lvl, 0, state.aux[0]))
        for it in range(1, cfg.iterations_per_level + 1):
            o, d = state.params
            grads = level_grad(problem, o, d, weights, weights.alpha[lvl], state.aux[1])
            if max(np.abs(g).max() for g in grads) < cfg.grad_tolerance:
                break
            new = step(state, grads, objective, cfg.rms_decay, cfg.step_growth, cfg.max_halvings)
            if new.stalled or new is state:
                break
            state = new
            trace.append(TraceEntry(lvl, it, state.aux[0]))
        overall, dynamic = state.params
        log.debug("level %d: %d points, loss %.6g after %d iterations", lvl, len(sel1), state.loss, trace[-1].iteration)
        prev_ids = sel1
    return FlowEstimate(overall, dynamic, static_full, trace, ids1, ids2)
