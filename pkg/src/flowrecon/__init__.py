"""Scene-flow geometric losses, flow-quality metrics, and scene-flow-driven
dynamic TSDF reconstruction."""

__version__ = "0.1.0"

from .geometry import (
    FlowField,
    NeighborIndex,
    PointCloud,
    build_index,
    estimate_normals,
    nearest,
)
from .icp import IcpConfig, IcpError, RigidTransform, icp_point_to_plane
from .integrator import (
    FlowSource,
    PipelineConfig,
    ReconstructionState,
    RefineConfig,
    VoxelFlowField,
    baseline_flow,
    reconstruct_step,
    refine_vector_field,
    render_synthetic_depth,
    warp_cloud,
)
from .losses import LossReport, LossWeights, combined_loss, cosine_loss, l2_loss, point_to_plane_loss
from .metrics import MetricReport, compute_metrics
from .tsdf import (
    DepthMap,
    Intrinsics,
    TriangleMesh,
    TsdfVolume,
    backproject,
    extract_mesh,
    load_volume,
    mesh_error,
    save_volume,
)

__all__ = [
    "FlowField",
    "NeighborIndex",
    "PointCloud",
    "build_index",
    "estimate_normals",
    "nearest",
    "IcpConfig",
    "IcpError",
    "RigidTransform",
    "icp_point_to_plane",
    "FlowSource",
    "PipelineConfig",
    "ReconstructionState",
    "RefineConfig",
    "VoxelFlowField",
    "baseline_flow",
    "reconstruct_step",
    "refine_vector_field",
    "render_synthetic_depth",
    "warp_cloud",
    "LossReport",
    "LossWeights",
    "combined_loss",
    "cosine_loss",
    "l2_loss",
    "point_to_plane_loss",
    "MetricReport",
    "compute_metrics",
    "DepthMap",
    "Intrinsics",
    "TriangleMesh",
    "TsdfVolume",
    "backproject",
    "extract_mesh",
    "load_volume",
    "mesh_error",
    "save_volume",
]
