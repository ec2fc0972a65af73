"""Unsupervised 3-D scene flow from RGB-D frame pairs by direct loss minimization."""

from .errors import FormatError, InvalidInputError, NumericalError, RegistrationError, SceneFlowError
from .geometry import (
    CameraIntrinsics,
    DepthMap,
    PointCloud,
    RigidTransform,
    apply_transform,
    farthest_point_order,
    project,
    static_flow,
    unproject,
)
from .neighbors import SpatialIndex
from .losses import (
    LossBreakdown,
    LossWeights,
    bilinear_depth,
    chamfer,
    depth_consistency,
    ds_consistency,
    idw_interpolate,
    laplacian_coords,
    laplacian_reg,
    total_loss,
)
from .optimizer import FlowEstimate, OptimizerConfig, estimate_flow
from .preprocess import PreprocessConfig, preprocess
from .icp import IcpConfig, IcpResult, icp_flow, icp_register
from .evaluation import MetricReport, evaluate
from .synth import SceneSpec, render

__version__ = "0.1.0"

__all__ = [
    "FormatError",
    "InvalidInputError",
    "NumericalError",
    "RegistrationError",
    "SceneFlowError",
    "CameraIntrinsics",
    "DepthMap",
    "PointCloud",
    "RigidTransform",
    "apply_transform",
    "farthest_point_order",
    "project",
    "static_flow",
    "unproject",
    "SpatialIndex",
    "LossBreakdown",
    "LossWeights",
    "bilinear_depth",
    "chamfer",
    "depth_consistency",
    "ds_consistency",
    "idw_interpolate",
    "laplacian_coords",
    "laplacian_reg",
    "total_loss",
    "FlowEstimate",
    "OptimizerConfig",
    "estimate_flow",
    "PreprocessConfig",
    "preprocess",
    "IcpConfig",
    "IcpResult",
    "icp_flow",
    "icp_register",
    "MetricReport",
    "evaluate",
    "SceneSpec",
    "render",
]
