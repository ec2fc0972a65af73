"""Scene-flow accuracy metrics: EPE3D, Acc3D Strict/Relax and Outliers3D."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InvalidInputError

STRICT_ABS, STRICT_REL = 0.05, 0.05
RELAX_ABS, RELAX_REL = 0.1, 0.1
OUTLIER_ABS, OUTLIER_REL = 0.3, 0.1


@dataclass(frozen=True)
class MetricReport:
    epe3d: float
    acc3d_strict: float
    acc3d_relax: float
    outliers3d: float
    point_count: int

    def as_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        width = max(len(k) for k in self.as_dict())
        return "".join(f"{k:<{width}}  {v if isinstance(v, int) else f'{v:.6f}'}\n" for k, v in self.as_dict().items())

    def to_csv(self) -> str:
        d = self.as_dict()
        return ",".join(d) + "\n" + ",".join(repr(v) for v in d.values()) + "\n"


def relative_errors(err, gt_norm) -> np.ndarray:
    """``err / |gt|``; 0 where both vanish, +inf where only the ground truth does."""
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = err / gt_norm
    return np.where(gt_norm == 0, np.where(err == 0, 0.0, np.inf), rel)


def evaluate(pred, gt) -> MetricReport:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise InvalidInputError(f"flow shapes differ or are not (N, 3): {pred.shape} vs {gt.shape}")
    if len(pred) == 0:
        raise InvalidInputError("cannot evaluate empty flow fields")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(gt))):
        raise InvalidInputError("flow fields must be finite")
    err = np.linalg.norm(pred - gt, axis=1)
    rel = relative_errors(err, np.linalg.norm(gt, axis=1))
    n = len(err)
    strict = (err < STRICT_ABS) | (rel < STRICT_REL)
    relax = (err < RELAX_ABS) | (rel < RELAX_REL)
    outlier = (err > OUTLIER_ABS) | (rel > OUTLIER_REL)
    return MetricReport(
        epe3d=math.fsum(err.tolist()) / n,
        acc3d_strict=int(strict.sum()) / n,
        acc3d_relax=int(relax.sum()) / n,
        outliers3d=int(outlier.sum()) / n,
        point_count=n,
    )
