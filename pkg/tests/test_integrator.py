"""Tests for cloud warping, synthetic depth rendering, voxel field refinement,
baseline flows, and the per-frame reconstruction step."""

import numpy as np
import pytest

from flowrecon.fixtures import (
    corner_cloud,
    plane_sdf_volume,
    sphere_depth,
    wall_depth,
)
from flowrecon.geometry import FlowField, PointCloud
from flowrecon.icp import IcpConfig, RigidTransform
from flowrecon.integrator import (
    FlowSource,
    PipelineConfig,
    ReconstructionState,
    RefineConfig,
    VoxelFlowField,
    baseline_flow,
    match_flow_to_cloud,
    reconstruct_step,
    refine_vector_field,
    render_synthetic_depth,
    warp_cloud,
)
from flowrecon.tsdf import Intrinsics, TsdfVolume, backproject, extract_mesh, mesh_error

IDENTITY = RigidTransform.identity()


def small_intrinsics():
    return Intrinsics(fx=60.0, fy=60.0, cx=39.5, cy=29.5, width=80, height=60)


class TestWarpCloud:
    def test_zero_flow_identity(self):
        cloud = PointCloud(np.random.default_rng(0).uniform(size=(20, 3)))
        out = warp_cloud(cloud, FlowField.zeros(20))
        np.testing.assert_array_equal(out.points, cloud.points)

    def test_constant_flow_translates(self):
        cloud = PointCloud(np.random.default_rng(1).uniform(size=(15, 3)))
        out = warp_cloud(cloud, FlowField(np.tile([0.01, 0.0, 0.0], (15, 1))))
        np.testing.assert_allclose(out.points, cloud.points + [0.01, 0, 0], atol=1e-15)

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(2)
        pts = rng.uniform(size=(30, 3))
        vecs = rng.normal(size=(30, 3))
        out = warp_cloud(PointCloud(pts), FlowField(vecs))
        expected = np.array([[p[a] + v[a] for a in range(3)] for p, v in zip(pts, vecs)])
        np.testing.assert_array_equal(out.points, expected)

    def test_normals_dropped_colors_kept(self):
        pts = np.random.default_rng(3).uniform(size=(10, 3))
        normals = np.tile([0.0, 0.0, 1.0], (10, 1))
        colors = np.random.default_rng(4).uniform(size=(10, 3))
        cloud = PointCloud(pts, normals=normals, colors=colors)
        out = warp_cloud(cloud, FlowField.zeros(10))
        assert out.normals is None
        np.testing.assert_array_equal(out.colors, colors)

    def test_length_mismatch_errors(self):
        with pytest.raises(ValueError):
            warp_cloud(PointCloud(np.zeros((3, 3))), FlowField.zeros(4))

    def test_round_trip_with_negated_flow(self):
        # dyadic coordinates so the additions are exact and invertible
        rng = np.random.default_rng(5)
        pts = rng.integers(-1024, 1024, size=(25, 3)) / 1024.0
        flow = FlowField(rng.integers(-1024, 1024, size=(25, 3)) / 1024.0)
        there = warp_cloud(PointCloud(pts), flow)
        back = warp_cloud(there, FlowField(-flow.vectors))
        np.testing.assert_array_equal(back.points, pts)


class TestRenderSyntheticDepth:
    def test_single_point_pinhole(self):
        k = Intrinsics(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=101, height=101)
        depth = render_synthetic_depth(PointCloud([[0.0, 0.0, 1.0]]), IDENTITY, k)
        assert depth.depth[50, 50] == 1.0
        assert np.count_nonzero(depth.depth) == 1

    def test_z_buffer_keeps_nearest(self):
        k = Intrinsics(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=101, height=101)
        cloud = PointCloud([[0.0, 0.0, 1.2], [0.0, 0.0, 0.8]])
        depth = render_synthetic_depth(cloud, IDENTITY, k)
        assert depth.depth[50, 50] == 0.8

    def test_points_behind_camera_discarded(self):
        k = small_intrinsics()
        depth = render_synthetic_depth(PointCloud([[0.0, 0.0, -1.0]]), IDENTITY, k)
        assert np.count_nonzero(depth.depth) == 0

    def test_matches_brute_force_projection(self):
        rng = np.random.default_rng(6)
        k = small_intrinsics()
        pts = rng.uniform([-0.3, -0.3, 0.2], [0.3, 0.3, 1.0], size=(500, 3))
        depth = render_synthetic_depth(PointCloud(pts), IDENTITY, k)
        oracle = np.zeros((k.height, k.width))
        for x, y, z in pts:
            if z <= 0:
                continue
            u = round(k.fx * x / z + k.cx)
            v = round(k.fy * y / z + k.cy)
            if 0 <= u < k.width and 0 <= v < k.height:
                if oracle[v, u] == 0 or z < oracle[v, u]:
                    oracle[v, u] = z
        np.testing.assert_array_equal(depth.depth, oracle)

    def test_zbuffer_never_below_nearest_z(self):
        rng = np.random.default_rng(7)
        k = small_intrinsics()
        pts = rng.uniform([-0.2, -0.2, 0.3], [0.2, 0.2, 0.9], size=(300, 3))
        depth = render_synthetic_depth(PointCloud(pts), IDENTITY, k)
        valid = depth.depth[depth.depth > 0]
        assert valid.min() >= pts[:, 2].min() - 1e-12

    def test_splat_covers_neighbors(self):
        k = Intrinsics(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=101, height=101)
        cloud = PointCloud([[0.0, 0.0, 1.0]])
        depth = render_synthetic_depth(cloud, IDENTITY, k, splat=True)
        assert np.count_nonzero(depth.depth) == 9

    def test_round_trip_with_backproject(self):
        k = small_intrinsics()
        depth = wall_depth(0.5, k)
        cloud = backproject(depth)
        again = render_synthetic_depth(cloud, IDENTITY, k)
        np.testing.assert_allclose(again.depth, depth.depth, atol=1e-12)


class TestRefineVectorField:
    VOXEL = 0.25  # coarse grid so the fixed 0.1 step contracts (truncation 1 m)

    def make_pair(self, shift_z):
        res = (48, 48, 24)
        origin = np.zeros(3)
        plane_z = 12 * self.VOXEL
        glob = plane_sdf_volume(res, self.VOXEL, origin, plane_z)
        live = plane_sdf_volume(res, self.VOXEL, origin, plane_z + shift_z)
        return glob, live

    def test_identical_volumes_fixed_point(self):
        glob, live = self.make_pair(0.0)
        flow, energy = refine_vector_field(live, glob, RefineConfig(iterations=5))
        np.testing.assert_array_equal(flow.vectors, 0.0)
        np.testing.assert_array_equal(energy, 0.0)

    def test_recovers_half_voxel_translation(self):
        shift = 0.5 * self.VOXEL
        glob, live = self.make_pair(shift)
        cfg = RefineConfig(step_alpha=0.1, iterations=30)
        flow, energy = refine_vector_field(live, glob, cfg)
        assert energy[-1] <= 0.1 * energy[0]
        assert np.all(np.diff(energy) <= 1e-12)
        active = (glob.weight > 0) & (np.abs(glob.tsdf) < 1.0)
        ii, jj, kk = np.nonzero(active)
        updatable = (
            (ii > 0) & (ii < glob.resolution[0] - 1)
            & (jj > 0) & (jj < glob.resolution[1] - 1)
            & (kk > 0) & (kk < glob.resolution[2] - 1)
        )
        err = np.linalg.norm(flow.vectors[ii, jj, kk] - [0.0, 0.0, shift], axis=1)
        assert err[updatable].max() < 0.2 * self.VOXEL

    def test_single_step_matches_hand_computed_update(self):
        glob, live = self.make_pair(0.5 * self.VOXEL)
        flow, _ = refine_vector_field(live, glob, RefineConfig(step_alpha=0.1, iterations=1))
        x = np.array([24, 24, 12])
        p = x * self.VOXEL
        r = live.sample(p) - float(glob.tsdf[tuple(x)])
        g = live.gradient(p)
        np.testing.assert_allclose(flow.vectors[tuple(x)], -0.1 * r * g, atol=1e-15)

    def test_grid_mismatch_errors(self):
        a = TsdfVolume((8, 8, 8), 0.1, np.zeros(3))
        b = TsdfVolume((8, 8, 9), 0.1, np.zeros(3))
        with pytest.raises(ValueError, match="grids do not match"):
            refine_vector_field(a, b)

    def test_energy_finite_and_field_valid(self):
        glob, live = self.make_pair(1.2 * self.VOXEL)
        flow, energy = refine_vector_field(live, glob, RefineConfig(iterations=40))
        assert np.isfinite(energy).all()
        assert np.isfinite(flow.vectors).all()
        cap = 2.0 * glob.truncation
        assert np.linalg.norm(flow.vectors.reshape(-1, 3), axis=1).max() <= cap + 1e-12


class TestBaselineFlow:
    def test_identical_clouds_rigid_zero(self):
        cloud = corner_cloud(8)
        flow = baseline_flow(cloud, PointCloud(cloud.points.copy()), "rigid")
        assert np.abs(flow.vectors).max() < 1e-6

    def test_nn_translation_recovered(self):
        rng = np.random.default_rng(8)
        pts = rng.uniform(size=(50, 3)) * 2.0
        t = np.array([0.004, -0.002, 0.003])  # small vs typical spacing
        live = PointCloud(pts)
        canonical = PointCloud(pts + t)
        flow = baseline_flow(live, canonical, "nn")
        np.testing.assert_allclose(flow.vectors, np.tile(t, (50, 1)), atol=1e-12)

    def test_rigid_on_transformed_corner(self):
        from flowrecon.metrics import compute_metrics

        angle = np.radians(4.0)
        rot = np.array([
            [np.cos(angle), -np.sin(angle), 0.0],
            [np.sin(angle), np.cos(angle), 0.0],
            [0.0, 0.0, 1.0],
        ])
        gt_transform = RigidTransform(rot, [0.02, -0.01, 0.015])
        live = corner_cloud(10)
        canonical = PointCloud(gt_transform.apply(live.points))
        flow = baseline_flow(live, canonical, "rigid")
        gt_flow = FlowField(gt_transform.apply(live.points) - live.points)
        report = compute_metrics(flow, gt_flow)
        assert report.epe < 1e-4

    def test_unknown_variant(self):
        cloud = corner_cloud(5)
        with pytest.raises(ValueError):
            baseline_flow(cloud, cloud, "deep")


class TestExternalFlowMatching:
    def test_reorders_by_position(self):
        rng = np.random.default_rng(9)
        pts = rng.uniform(size=(40, 3))
        vecs = rng.normal(size=(40, 3))
        perm = rng.permutation(40)
        matched = match_flow_to_cloud(
            PointCloud(pts[perm]), FlowField(vecs[perm]), PointCloud(pts)
        )
        np.testing.assert_array_equal(matched.vectors, vecs)

    def test_position_gap_errors(self):
        pts = np.random.default_rng(10).uniform(size=(10, 3))
        with pytest.raises(ValueError, match="do not match"):
            match_flow_to_cloud(
                PointCloud(pts + 0.01), FlowField(np.zeros((10, 3))), PointCloud(pts)
            )


def static_scene_depth(k=None):
    """Static three-plane corner scene: planar surfaces raycast without bias
    and the slanted floor/side walls pin all six pose degrees of freedom."""
    from flowrecon.fixtures import corner_scene_depth, deforming_scene_params

    p = deforming_scene_params()
    return corner_scene_depth(p["intrinsics"], p["box_lo"], p["box_hi"])


def make_state():
    from flowrecon.fixtures import deforming_scene_params

    p = deforming_scene_params()
    return ReconstructionState(
        volume=TsdfVolume(p["resolution"], p["voxel_size"], p["origin"].copy())
    )


def scene_pipeline_config(voxel=0.005, icp_gate=0.012, refine_iterations=10):
    # refine step scaled by truncation^2 so the fixed-point iteration
    # contracts at this grid scale
    delta = 4.0 * voxel
    return PipelineConfig(
        icp=IcpConfig(max_correspondence_dist=icp_gate),
        refine=RefineConfig(step_alpha=0.1 * delta * delta, iterations=refine_iterations),
    )


class TestReconstructStep:
    def test_bootstrap_equals_plain_integration(self):
        depth = static_scene_depth()
        state = make_state()
        diag = reconstruct_step(state, depth, FlowSource("zero"))
        assert diag.status == "bootstrap"
        assert state.frame == 1
        reference = TsdfVolume(state.volume.resolution, state.volume.voxel_size,
                               state.volume.origin.copy())
        reference.integrate_depth(depth, IDENTITY)
        np.testing.assert_array_equal(state.volume.tsdf, reference.tsdf)
        np.testing.assert_array_equal(state.volume.weight, reference.weight)

    def test_static_scene_self_consistency(self):
        depth = static_scene_depth()
        single = make_state()
        reconstruct_step(single, depth, FlowSource("zero"))
        single_mesh = extract_mesh(single.volume)

        state = make_state()
        cfg = scene_pipeline_config()
        diags = [reconstruct_step(state, depth, FlowSource("zero"), cfg) for _ in range(10)]
        assert state.frame == 10
        assert all(d.status in ("bootstrap", "ok") for d in diags)
        mean, _ = mesh_error(extract_mesh(state.volume), single_mesh)
        assert mean < 0.5 * state.volume.voxel_size

    def test_icp_failure_skips_frame(self):
        state = make_state()
        depth = static_scene_depth()
        reconstruct_step(state, depth, FlowSource("zero"))
        before_tsdf = state.volume.tsdf.copy()
        before_pose = state.camera_pose.matrix().copy()
        # a frame with no overlap at the gate forces the tracking-loss path
        far = wall_depth(0.31, depth.intrinsics, half_extent=0.02)
        cfg = PipelineConfig(icp=IcpConfig(max_correspondence_dist=0.01))
        diag = reconstruct_step(state, far, FlowSource("zero"), cfg)
        assert diag.status == "skipped"
        assert state.frame == 2
        np.testing.assert_array_equal(state.volume.tsdf, before_tsdf)
        np.testing.assert_array_equal(state.camera_pose.matrix(), before_pose)

    def test_deterministic(self):
        def run():
            state = make_state()
            cfg = scene_pipeline_config()
            for _ in range(3):
                reconstruct_step(state, static_scene_depth(), FlowSource("zero"), cfg)
            return state.volume

        a = run()
        b = run()
        np.testing.assert_array_equal(a.tsdf, b.tsdf)
        np.testing.assert_array_equal(a.weight, b.weight)

    def test_flow_length_mismatch_errors(self, tmp_path):
        from flowrecon.ply import write_flow

        state = make_state()
        reconstruct_step(state, static_scene_depth(), FlowSource("zero"))
        write_flow(tmp_path / "flow_000001.ply",
                   PointCloud(np.zeros((2, 3))), FlowField(np.zeros((2, 3))))
        src = FlowSource("external", path=str(tmp_path))
        with pytest.raises(ValueError):
            reconstruct_step(state, static_scene_depth(), src)


class TestVoxelFlowField:
    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            VoxelFlowField((4, 4, 4), 0.1, np.zeros(3),
                           np.full((4, 4, 4, 3), np.nan))

    def test_zeros_like_matches_geometry(self):
        vol = TsdfVolume((5, 6, 7), 0.02, np.array([1.0, 2.0, 3.0]))
        f = VoxelFlowField.zeros_like(vol)
        assert f.resolution == vol.resolution
        assert f.voxel_size == vol.voxel_size
        np.testing.assert_array_equal(f.origin, vol.origin)
