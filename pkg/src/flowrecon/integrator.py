"""Scene-flow integration: cloud warping, synthetic depth rendering, voxel
vector-field refinement, baseline flow predictors, and the per-frame
reconstruction step fusing flow-warped observations into a canonical volume."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .geometry import FlowField, PointCloud, build_index, estimate_normals, nearest_many
from .icp import IcpConfig, IcpError, RigidTransform, icp_point_to_plane
from .tsdf import DepthMap, Intrinsics, TsdfVolume, backproject

log = logging.getLogger(__name__)

FLOW_MATCH_TOL = 1e-6


def warp_cloud(live: PointCloud, flow: FlowField) -> PointCloud:
    """Displace every point by its flow vector. Colors carry over; normals are
    dropped (invalid after a non-rigid warp)."""
    if len(live) != len(flow):
        raise ValueError("flow length does not match cloud")
    return PointCloud(
        live.points + flow.vectors,
        colors=None if live.colors is None else live.colors.copy(),
    )


def render_synthetic_depth(
    cloud: PointCloud,
    camera_pose: RigidTransform,
    intrinsics: Intrinsics,
    splat: bool = False,
) -> DepthMap:
    """Project a point cloud into a z-buffered depth map.

    Points behind the camera are discarded; each surviving point writes its
    camera-frame depth to the nearest pixel, keeping the smallest depth per
    pixel. With ``splat`` enabled each point also covers its 8 pixel
    neighbors. Untouched pixels stay invalid (0).
    """
    k = intrinsics
    cam = (cloud.points - camera_pose.translation) @ camera_pose.rotation
    z = cam[:, 2]
    ok = z > 0
    cam, z = cam[ok], z[ok]
    u = np.rint(k.fx * cam[:, 0] / z + k.cx).astype(np.int64)
    v = np.rint(k.fy * cam[:, 1] / z + k.cy).astype(np.int64)

    buf = np.full((k.height, k.width), np.inf)
    offsets = [(0, 0)]
    if splat:
        offsets = [(dv, du) for dv in (-1, 0, 1) for du in (-1, 0, 1)]
    for dv, du in offsets:
        uu, vv = u + du, v + dv
        keep = (uu >= 0) & (uu < k.width) & (vv >= 0) & (vv < k.height)
        np.minimum.at(buf, (vv[keep], uu[keep]), z[keep])
    buf[~np.isfinite(buf)] = 0.0
    return DepthMap(buf, intrinsics)


@dataclass
class VoxelFlowField:
    """Per-voxel 3D displacement grid sharing a TsdfVolume's geometry."""

    resolution: Tuple[int, int, int]
    voxel_size: float
    origin: np.ndarray
    vectors: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        self.resolution = tuple(int(n) for n in self.resolution)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if self.vectors is None:
            self.vectors = np.zeros(self.resolution + (3,))
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.shape != self.resolution + (3,):
            raise ValueError("vectors array does not match resolution")
        if not np.isfinite(self.vectors).all():
            raise ValueError("flow field contains NaN or infinite values")

    @classmethod
    def zeros_like(cls, vol: TsdfVolume) -> "VoxelFlowField":
        return cls(vol.resolution, vol.voxel_size, vol.origin.copy())


@dataclass
class RefineConfig:
    """Gradient-descent settings for the voxel field refinement.

    ``step_alpha`` converts (residual x gradient) into meters of displacement;
    the useful iteration range is roughly 3-70. ``active_band`` selects which
    canonical voxels move (|tsdf| below the cutoff); ``cap_displacement``
    clamps per-voxel displacement to twice the truncation as a safety valve.
    """

    step_alpha: float = 0.1
    iterations: int = 30
    active_band: float = 1.0
    cap_displacement: bool = True

    def __post_init__(self):
        if self.step_alpha <= 0:
            raise ValueError("step_alpha must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")


def refine_vector_field(
    live: TsdfVolume, canonical: TsdfVolume, cfg: Optional[RefineConfig] = None
) -> Tuple[VoxelFlowField, np.ndarray]:
    """Align the live volume to the canonical one with per-voxel gradient descent.

    For every observed canonical voxel inside the active band the residual
    r = live(x + v) - canonical(x) is driven down by v <- v - alpha * r * grad
    live(x + v), Jacobi-ordered, for exactly cfg.iterations iterations. Voxels
    whose warped sample or gradient falls outside the live volume are skipped
    that iteration. Returns the field and the per-iteration energy trace
    E = 0.5 * sum(r^2).
    """
    if not canonical.same_grid(live):
        raise ValueError("volume grids do not match")
    cfg = cfg or RefineConfig()

    active = (canonical.weight > 0) & (np.abs(canonical.tsdf) < cfg.active_band)
    flow = VoxelFlowField.zeros_like(canonical)
    energy = np.zeros(cfg.iterations)
    idx = np.nonzero(active.reshape(-1))[0]
    if len(idx) == 0:
        return flow, energy

    ii, jj, kk = np.nonzero(active)
    centers = canonical.origin + np.column_stack([ii, jj, kk]) * canonical.voxel_size
    target = canonical.tsdf[ii, jj, kk].astype(np.float64)
    v = np.zeros_like(centers)
    cap = 2.0 * canonical.truncation

    for it in range(cfg.iterations):
        probe = centers + v
        vals, ok_s = live.sample_many(probe)
        grad, ok_g = live.gradient_many(probe)
        r = vals - target
        energy[it] = 0.5 * np.sum(r[ok_s] ** 2)
        upd = ok_s & ok_g
        v[upd] -= cfg.step_alpha * r[upd, None] * grad[upd]
        if cfg.cap_displacement:
            norms = np.linalg.norm(v, axis=1)
            over = norms > cap
            if over.any():
                v[over] *= (cap / norms[over])[:, None]

    flow.vectors.reshape(-1, 3)[idx] = v
    return flow, energy


# ----------------------------------------------------------------------
# flow sources


@dataclass
class FlowSource:
    """Pluggable flow predictor seam.

    Variants: "zero" (no motion), "rigid" (single rigid fit via ICP),
    "nn" (nearest canonical point), and "external" (per-frame PLY files with
    x,y,z,fx,fy,fz rows, matched to the live cloud by position).
    """

    variant: str = "zero"
    path: Optional[str] = None
    pattern: str = "flow_{frame:06d}.ply"

    def __post_init__(self):
        if self.variant not in ("zero", "rigid", "nn", "external"):
            raise ValueError(f"unknown flow source variant: {self.variant}")
        if self.variant == "external" and not self.path:
            raise ValueError("external flow source needs a path")

    def flow_for_frame(
        self, frame: int, live_cam: PointCloud, live_world: PointCloud,
        canonical: PointCloud,
    ) -> FlowField:
        if self.variant == "zero":
            return FlowField.zeros(len(live_world))
        if self.variant == "external":
            from pathlib import Path
            from .ply import read_flow
            file = Path(self.path) / self.pattern.format(frame=frame)
            positions, flow = read_flow(file)
            return match_flow_to_cloud(positions, flow, live_cam)
        return baseline_flow(live_world, canonical, self.variant)


def match_flow_to_cloud(
    positions: PointCloud, flow: FlowField, cloud: PointCloud,
    tol: float = FLOW_MATCH_TOL,
) -> FlowField:
    """Reorder file-provided flow rows to a cloud's point order by matching
    positions within ``tol`` meters."""
    if len(positions) != len(flow):
        raise ValueError("flow file row count mismatch")
    tree = cKDTree(positions.points)
    dist, idx = tree.query(cloud.points, k=1)
    if dist.max(initial=0.0) > tol:
        raise ValueError(
            f"flow file positions do not match the live cloud "
            f"(worst gap {dist.max():.3g} m)"
        )
    return FlowField(flow.vectors[idx])


def baseline_flow(live: PointCloud, canonical: PointCloud, variant: str) -> FlowField:
    """Classical stand-in flow predictors: one rigid ICP fit or nearest neighbor."""
    if len(live) == 0 or len(canonical) == 0:
        raise ValueError("empty point set")
    if variant == "rigid":
        target = canonical if canonical.has_normals() else estimate_normals(
            canonical, k=min(16, len(canonical))
        )
        transform, _, _ = icp_point_to_plane(
            live, target, cfg=IcpConfig(max_correspondence_dist=0.5, max_iterations=50)
        )
        return FlowField(transform.apply(live.points) - live.points)
    if variant == "nn":
        index = build_index(canonical)
        idx, _ = nearest_many(index, live.points)
        return FlowField(canonical.points[idx] - live.points)
    raise ValueError(f"unknown baseline variant: {variant}")


# ----------------------------------------------------------------------
# reconstruction pipeline


@dataclass
class FrameDiagnostics:
    frame: int
    status: str  # "ok", "bootstrap", or "skipped"
    n_points: int = 0
    icp_residual: float = 0.0
    icp_iterations: int = 0
    refine_energy: np.ndarray = field(default_factory=lambda: np.zeros(0))
    seconds: float = 0.0
    message: str = ""


@dataclass
class ReconstructionState:
    volume: TsdfVolume
    frame: int = 0
    camera_pose: RigidTransform = field(default_factory=RigidTransform.identity)


@dataclass
class PipelineConfig:
    icp: IcpConfig = field(default_factory=IcpConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    normals_k: int = 16
    splat: bool = False


def reconstruct_step(
    state: ReconstructionState,
    live_depth: DepthMap,
    flow_source: FlowSource,
    cfg: Optional[PipelineConfig] = None,
) -> FrameDiagnostics:
    """Advance the canonical volume by one frame.

    Frame 0 integrates directly with the identity pose. Later frames run, in
    order: rigid pre-alignment of the live cloud to the raycast canonical
    cloud (absorbed into the camera pose), flow prediction, cloud warping,
    synthetic depth rendering, live-volume integration, voxel field
    refinement, and weighted fusion. An ICP failure skips the frame and
    leaves the state unchanged.
    """
    cfg = cfg or PipelineConfig()
    t0 = time.perf_counter()
    frame = state.frame
    intr = live_depth.intrinsics

    if frame == 0:
        state.camera_pose = RigidTransform.identity()
        state.volume.integrate_depth(live_depth, state.camera_pose)
        state.frame += 1
        return FrameDiagnostics(
            frame=frame, status="bootstrap",
            n_points=int(np.count_nonzero(live_depth.depth > 0)),
            seconds=time.perf_counter() - t0,
        )

    live_cam = backproject(live_depth)
    canonical_cloud = state.volume.raycast(state.camera_pose, intr)
    diag = FrameDiagnostics(frame=frame, status="ok", n_points=len(live_cam))
    try:
        if len(canonical_cloud) < cfg.icp.min_correspondences:
            raise IcpError("insufficient overlap")
        target = estimate_normals(
            canonical_cloud, k=min(cfg.normals_k, len(canonical_cloud))
        )
        pose, diag.icp_residual, diag.icp_iterations = icp_point_to_plane(
            live_cam, target, init=state.camera_pose, cfg=cfg.icp
        )
    except IcpError as e:
        log.warning("frame %d skipped: %s", frame, e)
        diag.status = "skipped"
        diag.message = str(e)
        diag.seconds = time.perf_counter() - t0
        state.frame += 1
        return diag

    live_world = PointCloud(pose.apply(live_cam.points))
    flow = flow_source.flow_for_frame(frame, live_cam, live_world, canonical_cloud)
    if len(flow) != len(live_world):
        raise ValueError("flow length does not match live cloud")

    warped = warp_cloud(live_world, flow)
    synth = render_synthetic_depth(warped, pose, intr, splat=cfg.splat)
    live_vol = TsdfVolume(
        state.volume.resolution, state.volume.voxel_size,
        state.volume.origin.copy(), weight_cap=state.volume.weight_cap,
    )
    live_vol.integrate_depth(synth, pose)
    warp_field, diag.refine_energy = refine_vector_field(
        live_vol, state.volume, cfg.refine
    )
    state.volume.fuse(live_vol, warp_field)

    state.camera_pose = pose
    state.frame += 1
    diag.seconds = time.perf_counter() - t0
    return diag
