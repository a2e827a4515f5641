"""Point-cloud container, nearest-neighbor search, and surface-normal estimation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

_NORMAL_UNIT_TOL = 1e-6
_DEGENERATE_REL_GAP = 1e-9


def _as_points(a, name: str = "points") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains NaN or infinite values")
    return arr


@dataclass
class PointCloud:
    """Unordered set of 3D points with optional per-point normals and colors.

    All optional attribute arrays carry one row per point. Normals are unit
    vectors; ``degenerate`` marks points whose normal came from a
    rank-deficient neighborhood and should be skipped by consumers.
    """

    points: np.ndarray
    normals: Optional[np.ndarray] = None
    colors: Optional[np.ndarray] = None
    degenerate: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = _as_points(self.points)
        n = len(self.points)
        if self.normals is not None:
            self.normals = _as_points(self.normals, "normals")
            if len(self.normals) != n:
                raise ValueError("normals length does not match points")
            norms = np.linalg.norm(self.normals, axis=1)
            if np.abs(norms - 1.0).max(initial=0.0) > _NORMAL_UNIT_TOL:
                raise ValueError("normals must be unit length")
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64)
            if self.colors.shape != (n, 3):
                raise ValueError("colors must have shape (N, 3)")
            if self.colors.min(initial=0.0) < 0.0 or self.colors.max(initial=0.0) > 1.0:
                raise ValueError("colors must lie in [0, 1]")
        if self.degenerate is not None:
            self.degenerate = np.asarray(self.degenerate, dtype=bool)
            if self.degenerate.shape != (n,):
                raise ValueError("degenerate flags must have shape (N,)")

    def __len__(self) -> int:
        return len(self.points)

    def has_normals(self) -> bool:
        return self.normals is not None

    def copy(self) -> "PointCloud":
        return PointCloud(
            self.points.copy(),
            None if self.normals is None else self.normals.copy(),
            None if self.colors is None else self.colors.copy(),
            None if self.degenerate is None else self.degenerate.copy(),
        )


@dataclass
class FlowField:
    """Per-point 3D displacement vectors aligned with a source cloud."""

    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = _as_points(self.vectors, "vectors")

    def __len__(self) -> int:
        return len(self.vectors)

    @classmethod
    def zeros(cls, n: int) -> "FlowField":
        return cls(np.zeros((n, 3)))


@dataclass
class NeighborIndex:
    """Immutable spatial search structure over a fixed point set.

    Safe for concurrent read queries once built.
    """

    points: np.ndarray
    tree: cKDTree = field(repr=False)

    def knn(self, query, k: int) -> Tuple[np.ndarray, np.ndarray]:
        """k nearest neighbors of one or more query points.

        Returns (distances, indices) shaped like scipy's query output.
        """
        q = np.asarray(query, dtype=np.float64)
        return self.tree.query(q, k=k)

    def radius(self, query, r: float) -> list:
        return self.tree.query_ball_point(np.asarray(query, dtype=np.float64), r)


def build_index(cloud: PointCloud) -> NeighborIndex:
    """Build a k-d tree index over the cloud's points."""
    if len(cloud) == 0:
        raise ValueError("empty point set")
    pts = cloud.points
    return NeighborIndex(points=pts, tree=cKDTree(pts))


def nearest(index: NeighborIndex, query) -> Tuple[int, float]:
    """Index and distance of the nearest indexed point; ties go to the lowest index."""
    q = np.asarray(query, dtype=np.float64)
    d0, _ = index.tree.query(q, k=1)
    # Re-scan the candidate ball so exact ties resolve to the lowest index.
    r = float(d0) * (1.0 + 1e-12) + np.finfo(np.float64).tiny
    cand = index.tree.query_ball_point(q, r)
    cand = np.sort(np.asarray(cand, dtype=np.intp))
    dists = np.linalg.norm(index.points[cand] - q, axis=1)
    j = int(np.argmin(dists))
    return int(cand[j]), float(dists[j])


def nearest_many(index: NeighborIndex, queries: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized single-nearest-neighbor query: (indices, distances)."""
    d, i = index.tree.query(np.asarray(queries, dtype=np.float64), k=1)
    return np.asarray(i, dtype=np.intp), np.asarray(d, dtype=np.float64)


def estimate_normals(cloud: PointCloud, k: int = 16) -> PointCloud:
    """Attach PCA normals estimated from each point's k nearest neighbors.

    The normal is the eigenvector of the neighborhood covariance with the
    smallest eigenvalue, oriented to point from the surface toward the sensor
    origin (0, 0, 0). Neighborhoods whose two smallest eigenvalues coincide
    (within 1e-9 relative) are flagged degenerate; their normals are still
    unit vectors but carry no reliable direction.
    """
    n = len(cloud)
    if k < 3:
        raise ValueError("k must be at least 3")
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    pts = cloud.points
    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=k)
    neigh = pts[idx]  # (N, k, 3)
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    eigvals, eigvecs = np.linalg.eigh(cov)
    normals = eigvecs[:, :, 0]
    # eigh output is unit but renormalize to be safe against accumulated error
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)

    gap = eigvals[:, 1] - eigvals[:, 0]
    scale = np.maximum(eigvals[:, 1], np.finfo(np.float64).tiny)
    degenerate = gap <= _DEGENERATE_REL_GAP * scale

    # Orient toward the sensor origin: n . (0 - p) >= 0.
    flip = np.einsum("ij,ij->i", normals, pts) > 0.0
    normals[flip] *= -1.0

    return PointCloud(pts.copy(), normals=normals, colors=None if cloud.colors is None else cloud.colors.copy(), degenerate=degenerate)
