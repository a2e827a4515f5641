"""Tests for the TSDF volume: integration, sampling, raycasting, fusion,
meshing, mesh error, and the file interfaces."""

import numpy as np
import pytest

from flowrecon.fixtures import (
    DEFAULT_INTRINSICS,
    plane_mesh,
    plane_sdf_volume,
    sphere_depth,
    sphere_mesh,
    sphere_sdf_volume,
    wall_depth,
)
from flowrecon.icp import RigidTransform
from flowrecon.tsdf import (
    DepthMap,
    Intrinsics,
    TriangleMesh,
    TsdfVolume,
    backproject,
    extract_mesh,
    load_volume,
    mesh_error,
    read_depth_png,
    read_intrinsics,
    save_volume,
    write_depth_png,
    write_intrinsics,
)

IDENTITY = RigidTransform.identity()


def integrate_oracle(vol: TsdfVolume, depth: DepthMap, rotation, translation):
    """Independent per-voxel scalar-loop projective integration."""
    k = depth.intrinsics
    delta = vol.truncation
    nx, ny, nz = vol.resolution
    tsdf = vol.tsdf.copy()
    weight = vol.weight.copy()
    r = np.asarray(rotation)
    t = np.asarray(translation)
    d_img = depth.depth
    for i in range(nx):
        px = vol.origin[0] + i * vol.voxel_size
        for j in range(ny):
            py = vol.origin[1] + j * vol.voxel_size
            for kk in range(nz):
                pz = vol.origin[2] + kk * vol.voxel_size
                qx, qy, qz = px - t[0], py - t[1], pz - t[2]
                cx = qx * r[0][0] + qy * r[1][0] + qz * r[2][0]
                cy = qx * r[0][1] + qy * r[1][1] + qz * r[2][1]
                cz = qx * r[0][2] + qy * r[1][2] + qz * r[2][2]
                if cz <= 0:
                    continue
                u = round(k.fx * cx / cz + k.cx)
                v = round(k.fy * cy / cz + k.cy)
                if not (0 <= u < k.width and 0 <= v < k.height):
                    continue
                d = d_img[v, u]
                if d <= 0:
                    continue
                sdf = d - cz
                if sdf <= -delta:
                    continue
                value = min(1.0, sdf / delta)
                w = float(weight[i, j, kk])
                tsdf[i, j, kk] = np.float32((w * float(tsdf[i, j, kk]) + value) / (w + 1.0))
                weight[i, j, kk] = np.float32(min(w + 1.0, vol.weight_cap))
    return tsdf, weight


def small_intrinsics():
    return Intrinsics(fx=60.0, fy=60.0, cx=39.5, cy=29.5, width=80, height=60)


class TestIntegrate:
    def test_flat_wall_analytic_band(self):
        k = small_intrinsics()
        vol = TsdfVolume((40, 40, 80), 0.01, np.array([-0.2, -0.2, 0.05]))
        assert vol.truncation == pytest.approx(0.04)
        vol.integrate_depth(wall_depth(0.5, k), IDENTITY)

        def voxel_at(z):
            idx = int(round((z - 0.05) / 0.01))
            return vol.tsdf[20, 20, idx], vol.weight[20, 20, idx]

        t, w = voxel_at(0.48)  # 0.02 m in front: sdf 0.02 / 0.04
        assert w == 1.0
        assert t == pytest.approx(0.5)
        t, w = voxel_at(0.46)  # exactly one truncation in front
        assert t == pytest.approx(1.0)
        t, w = voxel_at(0.30)  # far free space
        assert t == pytest.approx(1.0)
        t, w = voxel_at(0.55)  # 0.05 behind: below -delta, untouched
        assert w == 0.0
        assert t == pytest.approx(1.0)

    def test_sphere_matches_scalar_loop_oracle_exactly(self):
        k = small_intrinsics()
        depth = sphere_depth([0.0, 0.0, 0.4], 0.1, k)
        vol = TsdfVolume((32, 32, 32), 0.01, np.array([-0.16, -0.16, 0.26]))
        expected_tsdf, expected_weight = integrate_oracle(vol, depth, np.eye(3), np.zeros(3))
        vol.integrate_depth(depth, IDENTITY)
        np.testing.assert_array_equal(vol.tsdf, expected_tsdf)
        np.testing.assert_array_equal(vol.weight, expected_weight)

    def test_idempotent_values_weights_accumulate(self):
        k = small_intrinsics()
        depth = wall_depth(0.4, k)
        vol = TsdfVolume((24, 24, 24), 0.01, np.array([-0.12, -0.12, 0.3]))
        vol.integrate_depth(depth, IDENTITY)
        once = vol.tsdf.copy()
        w_once = vol.weight.copy()
        vol.integrate_depth(depth, IDENTITY)
        np.testing.assert_array_equal(vol.tsdf, once)
        np.testing.assert_array_equal(vol.weight, np.minimum(2 * w_once, vol.weight_cap))

    def test_values_stay_in_range(self):
        rng = np.random.default_rng(0)
        k = small_intrinsics()
        vol = TsdfVolume((24, 24, 24), 0.01, np.array([-0.12, -0.12, 0.2]))
        for _ in range(4):
            noisy = DepthMap(rng.uniform(0.2, 0.5, size=(k.height, k.width)), k)
            vol.integrate_depth(noisy, IDENTITY)
        assert vol.tsdf.min() >= -1.0
        assert vol.tsdf.max() <= 1.0
        assert vol.weight.min() >= 0.0


class TestSample:
    def make_volume(self):
        vol = TsdfVolume((8, 8, 8), 0.1, np.zeros(3))
        vol.weight[:] = 1.0
        vol.tsdf[:] = 0.25
        return vol

    def test_exact_at_voxel_center(self):
        vol = self.make_volume()
        vol.tsdf[3, 4, 5] = -0.625
        assert vol.sample([0.3, 0.4, 0.5]) == pytest.approx(-0.625)

    def test_linear_midpoint(self):
        vol = self.make_volume()
        vol.tsdf[:] = 0.2
        vol.tsdf[4:, :, :] = 0.6
        value = vol.sample([0.35, 0.42, 0.47])  # x midway between planes 3 and 4
        assert value == pytest.approx(0.4)

    def test_outside_grid_and_unobserved(self):
        vol = self.make_volume()
        assert vol.sample([-0.05, 0.1, 0.1]) is None
        assert vol.sample([5.0, 5.0, 5.0]) is None
        vol.weight[2, 2, 2] = 0.0
        assert vol.sample([0.25, 0.25, 0.25]) is None  # participating corner unobserved
        assert vol.sample([0.2, 0.2, 0.2]) is None  # the voxel itself
        vol.weight[2, 2, 2] = 1.0
        assert vol.sample([0.25, 0.25, 0.25]) is not None

    def test_matches_trilinear_formula_oracle(self):
        rng = np.random.default_rng(1)
        vol = TsdfVolume((10, 9, 8), 0.05, np.array([0.3, -0.2, 0.1]))
        vol.tsdf[:] = rng.uniform(-1, 1, size=vol.resolution).astype(np.float32)
        vol.weight[:] = 1.0
        pts = vol.origin + rng.uniform(0.0, 1.0, size=(1000, 3)) * (
            (np.array(vol.resolution) - 1) * vol.voxel_size
        )
        vals, ok = vol.sample_many(pts)
        assert ok.all()
        for p, got in zip(pts, vals):
            g = (p - vol.origin) / vol.voxel_size
            i = np.minimum(np.floor(g).astype(int), np.array(vol.resolution) - 2)
            f = g - i
            expected = 0.0
            for dx in (0, 1):
                for dy in (0, 1):
                    for dz in (0, 1):
                        w = (
                            (f[0] if dx else 1 - f[0])
                            * (f[1] if dy else 1 - f[1])
                            * (f[2] if dz else 1 - f[2])
                        )
                        expected += w * float(vol.tsdf[i[0] + dx, i[1] + dy, i[2] + dz])
            assert got == pytest.approx(expected, abs=1e-12)

    def test_continuity(self):
        vol = self.make_volume()
        rng = np.random.default_rng(2)
        vol.tsdf[:] = rng.uniform(-1, 1, size=vol.resolution).astype(np.float32)
        p = np.array([0.33, 0.41, 0.27])
        base = vol.sample(p)
        for _ in range(20):
            q = p + rng.uniform(-1e-9, 1e-9, size=3)
            assert abs(vol.sample(q) - base) < 1e-6


class TestGradient:
    def test_linear_ramp(self):
        vol = TsdfVolume((12, 12, 12), 0.05, np.zeros(3))
        delta = vol.truncation
        xs = np.arange(12) * 0.05
        vol.tsdf[:] = np.broadcast_to((xs / (4 * delta))[:, None, None], vol.resolution).astype(np.float32)
        vol.weight[:] = 1.0
        g = vol.gradient([0.3, 0.3, 0.3])
        np.testing.assert_allclose(g, [1.0 / (4 * delta), 0.0, 0.0], atol=1e-9)

    def test_constant_zero(self):
        vol = TsdfVolume((8, 8, 8), 0.1, np.zeros(3))
        vol.tsdf[:] = 0.3
        vol.weight[:] = 1.0
        np.testing.assert_allclose(vol.gradient([0.35, 0.35, 0.35]), 0.0, atol=1e-12)

    def test_outside_returns_none(self):
        vol = TsdfVolume((8, 8, 8), 0.1, np.zeros(3))
        vol.weight[:] = 1.0
        assert vol.gradient([0.05, 0.05, 0.05]) is None  # probe exits the grid

    def test_analytic_sphere_direction(self):
        vol = sphere_sdf_volume((40, 40, 40), 0.01, np.array([-0.2, -0.2, -0.2]), np.zeros(3), 0.12)
        rng = np.random.default_rng(3)
        checked = 0
        for _ in range(200):
            # sample near the surface, inside the linear band
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            dist = 0.12 + rng.uniform(-0.3, 0.3) * vol.truncation
            p = direction * dist
            g = vol.gradient(p)
            if g is None:
                continue
            analytic = p / dist / vol.truncation
            np.testing.assert_allclose(g, analytic, rtol=0.05, atol=0.05 / vol.truncation * 0.05)
            checked += 1
        assert checked > 150


class TestRaycast:
    def test_flat_wall(self):
        k = small_intrinsics()
        vol = TsdfVolume((40, 40, 80), 0.01, np.array([-0.2, -0.2, 0.05]))
        vol.integrate_depth(wall_depth(0.5, k), IDENTITY)
        cloud = vol.raycast(IDENTITY, k)
        assert len(cloud) > 100
        assert np.abs(cloud.points[:, 2] - 0.5).max() < 0.5 * vol.voxel_size

    def test_empty_volume(self):
        vol = TsdfVolume((16, 16, 16), 0.01, np.zeros(3))
        cloud = vol.raycast(IDENTITY, small_intrinsics())
        assert len(cloud) == 0

    def test_sphere_surface(self):
        k = small_intrinsics()
        vol = sphere_sdf_volume((60, 60, 60), 0.005, np.array([-0.15, -0.15, 0.25]),
                                [0.0, 0.0, 0.4], 0.1)
        cloud = vol.raycast(IDENTITY, k)
        assert len(cloud) > 200
        dist = np.linalg.norm(cloud.points - [0.0, 0.0, 0.4], axis=1)
        assert np.abs(dist - 0.1).max() < 0.5 * vol.voxel_size


class TestFuse:
    def test_zero_weight_prior_adopts_live(self):
        rng = np.random.default_rng(4)
        live = TsdfVolume((10, 10, 10), 0.02, np.zeros(3))
        live.tsdf[:] = rng.uniform(-1, 1, size=live.resolution).astype(np.float32)
        live.weight[:] = rng.uniform(1, 5, size=live.resolution).astype(np.float32)
        empty = TsdfVolume((10, 10, 10), 0.02, np.zeros(3))
        empty.fuse(live)
        np.testing.assert_array_equal(empty.tsdf, live.tsdf)
        np.testing.assert_array_equal(empty.weight, live.weight)

    def test_equal_weight_mean(self):
        a = TsdfVolume((6, 6, 6), 0.02, np.zeros(3))
        a.tsdf[:] = 0.2
        a.weight[:] = 1.0
        b = TsdfVolume((6, 6, 6), 0.02, np.zeros(3))
        b.tsdf[:] = 0.6
        b.weight[:] = 1.0
        a.fuse(b)
        np.testing.assert_allclose(a.tsdf, 0.4, atol=1e-7)
        np.testing.assert_allclose(a.weight, 2.0)

    def test_grid_mismatch_errors(self):
        a = TsdfVolume((6, 6, 6), 0.02, np.zeros(3))
        b = TsdfVolume((6, 6, 7), 0.02, np.zeros(3))
        with pytest.raises(ValueError, match="grids do not match"):
            a.fuse(b)

    def test_three_volume_sequence_matches_running_average(self):
        rng = np.random.default_rng(5)
        shape = (7, 7, 7)
        livevols = []
        for _ in range(3):
            v = TsdfVolume(shape, 0.02, np.zeros(3))
            v.tsdf[:] = rng.uniform(-1, 1, size=shape).astype(np.float32)
            v.weight[:] = 1.0
            livevols.append(v)
        acc = TsdfVolume(shape, 0.02, np.zeros(3))
        for v in livevols:
            acc.fuse(v)
        # scalar running-average oracle over voxel values (unwarped centers
        # sample to the voxel's own value and weight); float32 storage between
        # steps mirrors the volume's representation
        expect = np.zeros(shape, dtype=np.float32)
        wsum = np.zeros(shape)
        for n, v in enumerate(livevols):
            if n == 0:
                expect = v.tsdf.copy()
            else:
                expect = (
                    (wsum * expect.astype(np.float64) + v.tsdf.astype(np.float64)) / (wsum + 1)
                ).astype(np.float32)
            wsum += 1
        np.testing.assert_allclose(acc.tsdf.astype(np.float64), expect.astype(np.float64), atol=1e-12)
        np.testing.assert_allclose(acc.weight, wsum)

    def test_fuse_empty_then_extract_equals_extract_live(self):
        k = small_intrinsics()
        live = TsdfVolume((32, 32, 48), 0.01, np.array([-0.16, -0.16, 0.2]))
        live.integrate_depth(wall_depth(0.4, k), IDENTITY)
        live.integrate_depth(wall_depth(0.4, k), IDENTITY)
        live.integrate_depth(wall_depth(0.4, k), IDENTITY)  # odd weights
        empty = TsdfVolume(live.resolution, live.voxel_size, live.origin.copy())
        empty.fuse(live)
        a = extract_mesh(empty)
        b = extract_mesh(live)
        np.testing.assert_array_equal(a.vertices, b.vertices)
        np.testing.assert_array_equal(a.triangles, b.triangles)


class TestExtractMesh:
    def test_constant_positive_empty(self):
        vol = TsdfVolume((8, 8, 8), 0.01, np.zeros(3))
        vol.tsdf[:] = 0.5
        vol.weight[:] = 1.0
        assert extract_mesh(vol).is_empty()

    def test_unobserved_cells_skipped(self):
        vol = plane_sdf_volume((10, 10, 10), 0.01, np.zeros(3), plane_z=0.045)
        vol.weight[:5, :, :] = 0.0
        mesh = extract_mesh(vol)
        # cells touching x-voxels 0..4 are gone; surviving vertices sit at x >= 5 * voxel
        assert mesh.vertices[:, 0].min() >= 5 * 0.01 - 1e-12

    def test_plane_exact_interpolation(self):
        vol = plane_sdf_volume((12, 12, 12), 0.01, np.zeros(3), plane_z=0.0437)
        mesh = extract_mesh(vol)
        assert not mesh.is_empty()
        np.testing.assert_allclose(mesh.vertices[:, 2], 0.0437, atol=1e-6)

    def test_sphere_vertices_on_surface(self):
        voxel = 0.003
        vol = sphere_sdf_volume((100, 100, 100), voxel,
                                np.array([-0.15, -0.15, -0.15]), np.zeros(3), 0.1)
        mesh = extract_mesh(vol)
        assert len(mesh.vertices) > 1000
        r = np.linalg.norm(mesh.vertices, axis=1)
        assert np.abs(r - 0.1).max() < 0.5 * voxel

    def test_triangles_reference_valid_vertices(self):
        vol = sphere_sdf_volume((30, 30, 30), 0.01, np.array([-0.15, -0.15, -0.15]),
                                np.zeros(3), 0.1)
        mesh = extract_mesh(vol)
        assert mesh.triangles.min() >= 0
        assert mesh.triangles.max() < len(mesh.vertices)


class TestMeshError:
    def test_self_distance_zero(self):
        mesh = sphere_mesh((0, 0, 0), 0.1, rings=16, segments=32)
        mean, per_vertex = mesh_error(mesh, mesh)
        assert mean == pytest.approx(0.0, abs=1e-12)
        assert per_vertex.max() < 1e-12

    def test_concentric_spheres_one_mm(self):
        inner = sphere_mesh((0, 0, 0), 0.100)
        outer = sphere_mesh((0, 0, 0), 0.101)
        mean, _ = mesh_error(inner, outer)
        assert mean == pytest.approx(0.001, rel=0.05)

    def test_point_above_large_triangle(self):
        tri = TriangleMesh(
            np.array([[0.0, 0, 0], [10.0, 0, 0], [0.0, 10, 0]]),
            np.array([[0, 1, 2]]),
        )
        h = 0.37
        probe = TriangleMesh(
            np.array([[1.0, 1.0, h], [2.0, 3.0, h], [1.5, 0.5, h]]),
            np.array([[0, 1, 2]]),
        )
        mean, per_vertex = mesh_error(probe, tri)
        np.testing.assert_allclose(per_vertex, h, atol=1e-12)

    def test_vertex_and_edge_regions(self):
        tri = TriangleMesh(
            np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0]]),
            np.array([[0, 1, 2]]),
        )
        probe = TriangleMesh(
            np.array([[-1.0, -1.0, 0.0], [0.5, -1.0, 0.0], [2.0, 0.0, 0.0]]),
            np.array([[0, 1, 2]]),
        )
        _, d = mesh_error(probe, tri)
        np.testing.assert_allclose(d[0], np.sqrt(2.0), atol=1e-12)  # vertex region
        np.testing.assert_allclose(d[1], 1.0, atol=1e-12)  # edge region
        np.testing.assert_allclose(d[2], 1.0, atol=1e-12)  # vertex b region

    def test_empty_mesh_errors(self):
        mesh = sphere_mesh((0, 0, 0), 0.1, rings=8, segments=16)
        empty = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        with pytest.raises(ValueError, match="empty mesh"):
            mesh_error(mesh, empty)


class TestFileInterfaces:
    def test_depth_png_round_trip(self, tmp_path):
        k = small_intrinsics()
        rng = np.random.default_rng(6)
        depth = DepthMap(rng.integers(0, 5000, size=(k.height, k.width)) / 1000.0, k)
        path = tmp_path / "d.png"
        write_depth_png(path, depth)
        back = read_depth_png(path, k)
        np.testing.assert_array_equal(back.depth, depth.depth)

    def test_intrinsics_round_trip(self, tmp_path):
        k = Intrinsics(fx=525.5, fy=524.25, cx=319.5, cy=239.5, width=640, height=480,
                       depth_scale=5000.0)
        path = tmp_path / "intrinsics.txt"
        write_intrinsics(path, k)
        assert read_intrinsics(path) == k

    def test_volume_checkpoint_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        vol = TsdfVolume((9, 8, 7), 0.004, np.array([0.1, -0.2, 0.3]))
        vol.tsdf[:] = rng.uniform(-1, 1, size=vol.resolution).astype(np.float32)
        vol.weight[:] = rng.uniform(0, 10, size=vol.resolution).astype(np.float32)
        path = tmp_path / "vol.tsdf"
        save_volume(path, vol)
        back = load_volume(path)
        assert back.resolution == vol.resolution
        assert back.voxel_size == vol.voxel_size
        np.testing.assert_array_equal(back.origin, vol.origin)
        np.testing.assert_array_equal(back.tsdf, vol.tsdf)
        np.testing.assert_array_equal(back.weight, vol.weight)

    def test_backproject_matches_pinhole(self):
        k = small_intrinsics()
        depth = wall_depth(0.5, k)
        cloud = backproject(depth)
        assert len(cloud) == k.width * k.height
        np.testing.assert_allclose(cloud.points[:, 2], 0.5)
        # a known pixel: u=39.5 -> x=0 is not a pixel center; check corner pixel
        p = cloud.points[0]  # pixel (0, 0)
        np.testing.assert_allclose(p[0], (0 - k.cx) * 0.5 / k.fx)
        np.testing.assert_allclose(p[1], (0 - k.cy) * 0.5 / k.fy)
