"""Point-to-plane ICP for rigid SE(3) alignment of a source cloud to a target."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .geometry import PointCloud, build_index, nearest_many

_ORTHO_TOL = 1e-9


class IcpError(RuntimeError):
    """Raised when ICP cannot produce a valid alignment."""


def _polar_rotation(m: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix to m (polar decomposition via SVD)."""
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        r = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return r


def _skew(w: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -w[2], w[1]],
        [w[2], 0.0, -w[0]],
        [-w[1], w[0], 0.0],
    ])


@dataclass
class RigidTransform:
    """SE(3) rotation + translation. Applies as p -> R p + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.rotation.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        rtr = self.rotation.T @ self.rotation
        if np.abs(rtr - np.eye(3)).max() > _ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(self.rotation) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation determinant is not +1")

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self o other: apply ``other`` first, then ``self``."""
        return RigidTransform(
            _polar_rotation(self.rotation @ other.rotation),
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def rotation_angle(self) -> float:
        """Rotation magnitude in radians."""
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))


def save_transform(path, transform: RigidTransform):
    """Write as a 4x4 row-major matrix in plain text."""
    np.savetxt(path, transform.matrix(), fmt="%.17g")


def load_transform(path) -> RigidTransform:
    return RigidTransform.from_matrix(np.loadtxt(path))


@dataclass
class IcpConfig:
    max_iterations: int = 30
    convergence_delta: float = 1e-6
    max_correspondence_dist: float = 0.1
    min_correspondences: int = 6

    def __post_init__(self):
        if self.max_iterations <= 0 or self.convergence_delta <= 0:
            raise ValueError("iteration and convergence settings must be positive")
        if self.max_correspondence_dist <= 0 or self.min_correspondences <= 0:
            raise ValueError("correspondence settings must be positive")


def icp_point_to_plane(
    source: PointCloud,
    target: PointCloud,
    init: Optional[RigidTransform] = None,
    cfg: Optional[IcpConfig] = None,
) -> Tuple[RigidTransform, float, int]:
    """Align source to target by minimizing squared point-to-plane residuals.

    Gauss-Newton on the small-angle parameterization (w, t): each iteration
    transforms the source, gathers nearest-neighbor correspondences within
    the distance gate, solves the 6x6 normal equations, and composes the
    linearized update with rotation re-orthonormalization. Returns the
    transform mapping source frame into target frame, the final RMS
    point-to-plane residual, and the number of iterations used.

    Raises IcpError("insufficient overlap") when too few correspondences
    survive the gate and IcpError("degenerate geometry") when the normal
    matrix is numerically singular (e.g. a single plane).
    """
    if len(source) == 0 or len(target) == 0:
        raise ValueError("empty point set")
    if not target.has_normals():
        raise ValueError("target cloud has no normals")
    cfg = cfg or IcpConfig()
    transform = init or RigidTransform.identity()
    index = build_index(target)

    residual = 0.0
    iterations = 0
    for iterations in range(1, cfg.max_iterations + 1):
        p = transform.apply(source.points)
        idx, dist = nearest_many(index, p)
        keep = dist <= cfg.max_correspondence_dist
        if int(keep.sum()) < cfg.min_correspondences:
            raise IcpError("insufficient overlap")
        pk = p[keep]
        qk = target.points[idx[keep]]
        nk = target.normals[idx[keep]]

        r = np.einsum("ij,ij->i", nk, pk - qk)
        residual = float(np.sqrt(np.mean(r * r)))
        jac = np.concatenate([np.cross(pk, nk), nk], axis=1)  # (M, 6)
        a = jac.T @ jac
        b = -jac.T @ r
        if np.linalg.cond(a) > 1e12:
            raise IcpError("degenerate geometry")
        delta = np.linalg.solve(a, b)

        w, t = delta[:3], delta[3:]
        inc_rot = _polar_rotation(np.eye(3) + _skew(w))
        transform = RigidTransform(inc_rot, t).compose(transform)
        if np.linalg.norm(delta) < cfg.convergence_delta:
            break

    return transform, residual, iterations
