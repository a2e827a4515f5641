"""Tests for rigid point-to-plane ICP and the SE(3) transform type."""

import numpy as np
import pytest

from flowrecon.fixtures import corner_cloud
from flowrecon.geometry import PointCloud, estimate_normals
from flowrecon.icp import (
    IcpConfig,
    IcpError,
    RigidTransform,
    icp_point_to_plane,
    load_transform,
    save_transform,
)


def rotation_about(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([
        [0, -axis[2], axis[1]],
        [axis[2], 0, -axis[0]],
        [-axis[1], axis[0], 0],
    ])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def make_pair(transform: RigidTransform, n_per_side=10):
    """Source corner cloud and its rigidly transformed copy with normals."""
    source = corner_cloud(n_per_side)
    target = PointCloud(transform.apply(source.points))
    return source, estimate_normals(target, k=8)


class TestRigidTransform:
    def test_invariants_enforced(self):
        with pytest.raises(ValueError):
            RigidTransform(np.eye(3) * 2.0, np.zeros(3))
        with pytest.raises(ValueError):
            RigidTransform(-np.eye(3), np.zeros(3))  # det -1

    def test_compose_inverse(self):
        rng = np.random.default_rng(0)
        t1 = RigidTransform(rotation_about([1, 2, 3], 0.3), rng.normal(size=3))
        t2 = RigidTransform(rotation_about([-1, 0, 2], -0.2), rng.normal(size=3))
        pts = rng.normal(size=(10, 3))
        np.testing.assert_allclose(
            t1.compose(t2).apply(pts), t1.apply(t2.apply(pts)), atol=1e-12
        )
        eye = t1.compose(t1.inverse())
        np.testing.assert_allclose(eye.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(eye.translation, 0.0, atol=1e-12)

    def test_text_round_trip(self, tmp_path):
        t = RigidTransform(rotation_about([0, 0, 1], 0.1), [0.1, -0.2, 0.3])
        path = tmp_path / "t.txt"
        save_transform(path, t)
        back = load_transform(path)
        np.testing.assert_allclose(back.matrix(), t.matrix(), atol=1e-15)
        assert len(path.read_text().splitlines()) == 4


class TestIcp:
    def test_fixed_point(self):
        source = corner_cloud(10)
        target = estimate_normals(PointCloud(source.points.copy()), k=8)
        transform, residual, iterations = icp_point_to_plane(source, target)
        assert iterations == 1
        assert residual == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(transform.matrix(), np.eye(4), atol=1e-12)

    def test_recovers_known_transform(self):
        gt = RigidTransform(rotation_about([0, 0, 1], np.radians(5.0)), [0.02, -0.01, 0.03])
        source, target = make_pair(gt, n_per_side=10)
        cfg = IcpConfig(max_iterations=60, convergence_delta=1e-10,
                        max_correspondence_dist=1.0)
        transform, residual, _ = icp_point_to_plane(source, target, cfg=cfg)
        err = transform.compose(gt.inverse())
        assert err.rotation_angle() < 1e-5
        assert np.linalg.norm(transform.translation - gt.translation) < 1e-5

    def test_single_plane_degenerate(self):
        rng = np.random.default_rng(1)
        pts = np.column_stack([rng.uniform(0, 1, (100, 2)), np.full(100, 1.0)])
        plane = PointCloud(pts, normals=np.tile([0.0, 0.0, -1.0], (100, 1)))
        with pytest.raises(IcpError, match="degenerate geometry"):
            icp_point_to_plane(plane, plane, cfg=IcpConfig(max_correspondence_dist=1.0))

    def test_insufficient_overlap(self):
        source = corner_cloud(6)
        far = PointCloud(source.points + 100.0)
        target = estimate_normals(far, k=8)
        with pytest.raises(IcpError, match="insufficient overlap"):
            icp_point_to_plane(source, target, cfg=IcpConfig(max_correspondence_dist=0.05))

    def test_missing_normals_errors(self):
        source = corner_cloud(6)
        with pytest.raises(ValueError, match="normals"):
            icp_point_to_plane(source, PointCloud(source.points.copy()))

    def test_residual_nonincreasing(self):
        gt = RigidTransform(rotation_about([1, 1, 0], np.radians(6.0)), [0.03, 0.01, -0.02])
        source, target = make_pair(gt)
        residuals = []
        for k in range(1, 9):
            cfg = IcpConfig(max_iterations=k, convergence_delta=1e-16,
                            max_correspondence_dist=1.0)
            _, r, _ = icp_point_to_plane(source, target, cfg=cfg)
            residuals.append(r)
        assert all(b <= a + 1e-12 for a, b in zip(residuals, residuals[1:]))

    def test_randomized_recovery_trials(self):
        """Small-motion recovery on seeded noise-free corners (subset of the
        100-trial acceptance criterion)."""
        rng = np.random.default_rng(77)
        cfg = IcpConfig(max_iterations=80, convergence_delta=1e-12,
                        max_correspondence_dist=1.0)
        failures = 0
        for _ in range(20):
            axis = rng.normal(size=3)
            angle = np.radians(rng.uniform(0, 10))
            trans = rng.uniform(-0.05, 0.05, size=3)
            gt = RigidTransform(rotation_about(axis, angle), trans)
            source, target = make_pair(gt)
            transform, _, _ = icp_point_to_plane(source, target, cfg=cfg)
            err = transform.compose(gt.inverse())
            if err.rotation_angle() > 1e-5 or np.linalg.norm(err.translation) > 1e-5:
                failures += 1
        assert failures == 0

    def test_output_rotation_orthonormal(self):
        gt = RigidTransform(rotation_about([2, -1, 1], np.radians(8.0)), [0.01, 0.02, 0.03])
        source, target = make_pair(gt)
        transform, _, _ = icp_point_to_plane(
            source, target, cfg=IcpConfig(max_correspondence_dist=1.0)
        )
        r = transform.rotation
        assert np.abs(r.T @ r - np.eye(3)).max() < 1e-9
        assert abs(np.linalg.det(r) - 1.0) < 1e-9
