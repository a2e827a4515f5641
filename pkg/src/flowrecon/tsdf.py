"""Dense truncated-signed-distance volume: integration, sampling, raycasting,
fusion, marching-cubes meshing, and mesh-to-mesh error evaluation."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from ._mc_tables import EDGE_TABLE, TRI_TABLE
from .geometry import PointCloud
from .icp import RigidTransform

TRUNCATION_VOXELS = 4.0
DEFAULT_WEIGHT_CAP = 128.0

_EDGE_TABLE = np.asarray(EDGE_TABLE, dtype=np.int32)
_TRI_TABLE = np.asarray(TRI_TABLE, dtype=np.int64)

# Local cube edge -> (endpoint axis array id, corner offset) in grid coordinates.
# Axis id 0/1/2 selects the x/y/z global edge array; offsets locate the edge's
# low corner relative to the cell's (i, j, k) corner.
_EDGE_AXIS = np.array([0, 1, 0, 1, 0, 1, 0, 1, 2, 2, 2, 2], dtype=np.int64)
_EDGE_OFFSET = np.array(
    [
        (0, 0, 0),  # e0:  v0-v1, x edge
        (1, 0, 0),  # e1:  v1-v2, y edge
        (0, 1, 0),  # e2:  v3-v2, x edge
        (0, 0, 0),  # e3:  v0-v3, y edge
        (0, 0, 1),  # e4:  v4-v5, x edge
        (1, 0, 1),  # e5:  v5-v6, y edge
        (0, 1, 1),  # e6:  v7-v6, x edge
        (0, 0, 1),  # e7:  v4-v7, y edge
        (0, 0, 0),  # e8:  v0-v4, z edge
        (1, 0, 0),  # e9:  v1-v5, z edge
        (1, 1, 0),  # e10: v2-v6, z edge
        (0, 1, 0),  # e11: v3-v7, z edge
    ],
    dtype=np.int64,
)


@dataclass
class Intrinsics:
    """Pinhole camera parameters plus the depth-image scale (units per meter)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 1000.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")


def write_intrinsics(path, k: Intrinsics):
    with open(path, "w") as f:
        for name in ("fx", "fy", "cx", "cy", "width", "height", "depth_scale"):
            f.write(f"{name}={getattr(k, name)!r}\n")


def read_intrinsics(path) -> Intrinsics:
    vals = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            vals[key.strip()] = value.strip()
    try:
        return Intrinsics(
            fx=float(vals["fx"]), fy=float(vals["fy"]),
            cx=float(vals["cx"]), cy=float(vals["cy"]),
            width=int(vals["width"]), height=int(vals["height"]),
            depth_scale=float(vals.get("depth_scale", 1000.0)),
        )
    except KeyError as e:
        raise ValueError(f"intrinsics file missing key {e}") from e


@dataclass
class DepthMap:
    """Per-pixel depth in meters; 0 marks invalid pixels."""

    depth: np.ndarray
    intrinsics: Intrinsics

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        k = self.intrinsics
        if self.depth.shape != (k.height, k.width):
            raise ValueError(f"depth shape {self.depth.shape} does not match intrinsics "
                             f"({k.height}, {k.width})")
        if not np.isfinite(self.depth).all() or self.depth.min(initial=0.0) < 0.0:
            raise ValueError("depth values must be finite and nonnegative")


def write_depth_png(path, depth_map: DepthMap):
    """Write depth as 16-bit grayscale PNG, values in depth_scale units (default mm)."""
    units = np.rint(depth_map.depth * depth_map.intrinsics.depth_scale)
    if units.max(initial=0.0) > 65535:
        raise ValueError("depth exceeds 16-bit range at this depth_scale")
    Image.fromarray(units.astype(np.uint16)).save(path)


def read_depth_png(path, intrinsics: Intrinsics) -> DepthMap:
    raw = np.array(Image.open(path))
    if raw.ndim != 2:
        raise ValueError("depth PNG must be single-channel")
    return DepthMap(raw.astype(np.float64) / intrinsics.depth_scale, intrinsics)


def backproject(depth_map: DepthMap) -> PointCloud:
    """Lift valid depth pixels to 3D points in the camera frame (row-major order)."""
    k = depth_map.intrinsics
    v, u = np.nonzero(depth_map.depth > 0)
    d = depth_map.depth[v, u]
    x = (u - k.cx) * d / k.fx
    y = (v - k.cy) * d / k.fy
    return PointCloud(np.column_stack([x, y, d]))


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    vertex_quality: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise ValueError("triangle indices out of range")
        if len(self.triangles):
            t = self.triangles
            if ((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])).any():
                raise ValueError("degenerate (repeated-index) triangle")
        if self.vertex_quality is not None:
            self.vertex_quality = np.asarray(self.vertex_quality, dtype=np.float64)
            if self.vertex_quality.shape != (len(self.vertices),):
                raise ValueError("vertex_quality length mismatch")

    def is_empty(self) -> bool:
        return len(self.vertices) == 0 or len(self.triangles) == 0


@dataclass
class TsdfVolume:
    """Dense TSDF grid. Values are signed distance normalized by the truncation
    band (4 voxels), clamped to [-1, 1]; weight 0 marks never-observed voxels
    (whose tsdf stays at the default 1)."""

    resolution: Tuple[int, int, int]
    voxel_size: float
    origin: np.ndarray
    tsdf: np.ndarray = field(repr=False, default=None)
    weight: np.ndarray = field(repr=False, default=None)
    weight_cap: float = DEFAULT_WEIGHT_CAP

    def __post_init__(self):
        self.resolution = tuple(int(n) for n in self.resolution)
        if any(n < 2 for n in self.resolution):
            raise ValueError("resolution must be at least 2 per axis")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if self.tsdf is None:
            self.tsdf = np.ones(self.resolution, dtype=np.float32)
        if self.weight is None:
            self.weight = np.zeros(self.resolution, dtype=np.float32)
        self.tsdf = np.asarray(self.tsdf, dtype=np.float32)
        self.weight = np.asarray(self.weight, dtype=np.float32)
        if self.tsdf.shape != self.resolution or self.weight.shape != self.resolution:
            raise ValueError("tsdf/weight arrays do not match resolution")

    @property
    def truncation(self) -> float:
        return TRUNCATION_VOXELS * self.voxel_size

    def same_grid(self, other: "TsdfVolume") -> bool:
        return (
            self.resolution == other.resolution
            and self.voxel_size == other.voxel_size
            and np.array_equal(self.origin, other.origin)
        )

    def voxel_centers_slab(self, i0: int, i1: int) -> np.ndarray:
        """World coordinates of voxel centers for x-slab [i0, i1), flattened C-order."""
        nx, ny, nz = self.resolution
        xs = self.origin[0] + np.arange(i0, i1) * self.voxel_size
        ys = self.origin[1] + np.arange(ny) * self.voxel_size
        zs = self.origin[2] + np.arange(nz) * self.voxel_size
        out = np.empty(((i1 - i0) * ny * nz, 3))
        grid = np.meshgrid(xs, ys, zs, indexing="ij")
        for a in range(3):
            out[:, a] = grid[a].ravel()
        return out

    def copy(self) -> "TsdfVolume":
        return TsdfVolume(self.resolution, self.voxel_size, self.origin.copy(),
                          self.tsdf.copy(), self.weight.copy(), self.weight_cap)

    # ------------------------------------------------------------------
    # integration

    def integrate_depth(self, depth_map: DepthMap, camera_pose: RigidTransform,
                        slab: int = 32):
        """Fuse one depth map into the volume (projective signed distance).

        camera_pose maps camera coordinates into the volume's world frame.
        Voxels projecting outside the image, onto invalid pixels, or deeper
        than one truncation band behind the surface are untouched.
        """
        k = depth_map.intrinsics
        delta = self.truncation
        rot = camera_pose.rotation
        trans = camera_pose.translation
        nx = self.resolution[0]
        plane = self.resolution[1] * self.resolution[2]
        tsdf_flat = self.tsdf.reshape(-1)
        weight_flat = self.weight.reshape(-1)

        for i0 in range(0, nx, slab):
            i1 = min(i0 + slab, nx)
            centers = self.voxel_centers_slab(i0, i1)
            cam = (centers - trans) @ rot  # R^T (p - t)
            z = cam[:, 2]
            ok = z > 0
            u = np.full(len(cam), -1, dtype=np.int64)
            v = np.full(len(cam), -1, dtype=np.int64)
            u[ok] = np.rint(k.fx * cam[ok, 0] / z[ok] + k.cx).astype(np.int64)
            v[ok] = np.rint(k.fy * cam[ok, 1] / z[ok] + k.cy).astype(np.int64)
            ok &= (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
            if not ok.any():
                continue
            d = np.zeros(len(cam))
            d[ok] = depth_map.depth[v[ok], u[ok]]
            ok &= d > 0
            sdf = d - z
            ok &= sdf > -delta
            if not ok.any():
                continue
            sel = np.nonzero(ok)[0]
            value = np.minimum(1.0, sdf[sel] / delta)
            flat = i0 * plane + sel
            w = weight_flat[flat].astype(np.float64)
            tsdf_flat[flat] = ((w * tsdf_flat[flat] + value) / (w + 1.0)).astype(np.float32)
            weight_flat[flat] = np.minimum(w + 1.0, self.weight_cap).astype(np.float32)

    # ------------------------------------------------------------------
    # interpolation

    def _trilinear(self, points: np.ndarray, fields: Tuple[np.ndarray, ...]):
        """Trilinear interpolation of one or more voxel fields at world points.

        Returns (list of value arrays, ok mask). A point is invalid when any
        corner that participates in the interpolation (nonzero trilinear
        weight) falls outside the grid or was never observed; this keeps exact
        voxel-center queries valid whenever that single voxel is observed.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        res = np.asarray(self.resolution)
        g = (pts - self.origin) / self.voxel_size
        inside = (g >= 0.0).all(axis=1) & (g <= res - 1).all(axis=1)

        i0 = np.floor(g).astype(np.int64)
        i0 = np.clip(i0, 0, res - 2)  # upper-boundary points use frac 1.0
        frac = g - i0
        ny, nz = self.resolution[1], self.resolution[2]
        base = (i0[:, 0] * ny + i0[:, 1]) * nz + i0[:, 2]
        strides = np.array([ny * nz, nz, 1], dtype=np.int64)

        weight_flat = self.weight.reshape(-1)
        field_flats = [np.asarray(f).reshape(-1) for f in fields]
        vals = [np.zeros(len(pts)) for _ in fields]
        ok = inside.copy()

        # Accumulate over the 8 corners; invalid points gather garbage at
        # index 0 and are masked out at the end.
        safe_base = np.where(inside, base, 0)
        for cx in (0, 1):
            wx = frac[:, 0] if cx else 1.0 - frac[:, 0]
            for cy in (0, 1):
                wy = frac[:, 1] if cy else 1.0 - frac[:, 1]
                for cz in (0, 1):
                    wz = frac[:, 2] if cz else 1.0 - frac[:, 2]
                    idx = safe_base + cx * strides[0] + cy * strides[1] + cz * strides[2]
                    w = wx * wy * wz
                    ok &= (weight_flat[idx] > 0) | (w == 0.0)
                    for out, flat in zip(vals, field_flats):
                        out += w * flat[idx].astype(np.float64)
        for out in vals:
            out[~ok] = np.nan
        return vals, ok

    def sample_many(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        (vals,), ok = self._trilinear(points, (self.tsdf,))
        return vals, ok

    def sample(self, point) -> Optional[float]:
        """Trilinearly interpolated tsdf at a world point, or None if outside."""
        vals, ok = self.sample_many(np.asarray(point, dtype=np.float64).reshape(1, 3))
        return float(vals[0]) if ok[0] else None

    def gradient_many(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        h = self.voxel_size
        grad = np.zeros_like(pts)
        ok = np.ones(len(pts), dtype=bool)
        for axis in range(3):
            offset = np.zeros(3)
            offset[axis] = h
            hi, ok_hi = self.sample_many(pts + offset)
            lo, ok_lo = self.sample_many(pts - offset)
            ok &= ok_hi & ok_lo
            grad[:, axis] = (hi - lo) / (2.0 * h)
        grad[~ok] = np.nan
        return grad, ok

    def gradient(self, point) -> Optional[np.ndarray]:
        """Central-difference spatial gradient (tsdf units per meter), or None."""
        g, ok = self.gradient_many(np.asarray(point, dtype=np.float64).reshape(1, 3))
        return g[0] if ok[0] else None

    # ------------------------------------------------------------------
    # raycasting

    def raycast(self, camera_pose: RigidTransform, intrinsics: Intrinsics) -> PointCloud:
        """Per-pixel ray march to the first +/- zero crossing of the tsdf.

        Marches at half-truncation steps and refines each crossing with one
        linear interpolation; pixels without a crossing emit nothing. Points
        are returned in row-major pixel order.
        """
        k = intrinsics
        u, v = np.meshgrid(np.arange(k.width), np.arange(k.height), indexing="xy")
        dirs_cam = np.column_stack([
            ((u - k.cx) / k.fx).ravel(),
            ((v - k.cy) / k.fy).ravel(),
            np.ones(k.width * k.height),
        ])
        dirs_cam /= np.linalg.norm(dirs_cam, axis=1, keepdims=True)
        dirs = dirs_cam @ camera_pose.rotation.T
        o = camera_pose.translation

        lo = self.origin
        hi = self.origin + (np.asarray(self.resolution) - 1) * self.voxel_size
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (lo - o) / dirs
            t1 = (hi - o) / dirs
        t_near = np.nanmax(np.minimum(t0, t1), axis=1)
        t_far = np.nanmin(np.maximum(t0, t1), axis=1)
        step = self.truncation / 2.0

        n = len(dirs)
        s = np.maximum(t_near, step * 1e-3)
        active = (t_far > 0) & (s < t_far)
        prev_val = np.zeros(n)
        prev_s = np.zeros(n)
        prev_ok = np.zeros(n, dtype=bool)
        hit_s = np.full(n, np.nan)

        while active.any():
            ai = np.nonzero(active)[0]
            pts = o + s[ai, None] * dirs[ai]
            vals, ok = self.sample_many(pts)
            cross = prev_ok[ai] & ok & (prev_val[ai] > 0) & (vals <= 0)
            if cross.any():
                ci = ai[cross]
                f0 = prev_val[ci]
                f1 = vals[cross]
                t = np.where(f0 == f1, 0.0, f0 / (f0 - f1))
                hit_s[ci] = prev_s[ci] + t * (s[ci] - prev_s[ci])
                active[ci] = False
            prev_val[ai] = vals
            prev_ok[ai] = ok
            prev_s[ai] = s[ai]
            s[ai] += step
            active &= s <= t_far

        found = np.isfinite(hit_s)
        points = o + hit_s[found, None] * dirs[found]
        return PointCloud(points.reshape(-1, 3))

    # ------------------------------------------------------------------
    # fusion

    def fuse(self, live: "TsdfVolume", warp=None, slab: int = 32):
        """Weighted-average fusion of a live volume, optionally through a
        per-voxel displacement field: each global voxel samples the live volume
        at its (warped) center and blends by interpolated live weight."""
        if not self.same_grid(live):
            raise ValueError("volume grids do not match")
        vectors = None
        if warp is not None:
            if warp.resolution != self.resolution:
                raise ValueError("warp grid does not match volume")
            vectors = warp.vectors.reshape(-1, 3)
        nx = self.resolution[0]
        plane = self.resolution[1] * self.resolution[2]
        tsdf_flat = self.tsdf.reshape(-1)
        weight_flat = self.weight.reshape(-1)

        for i0 in range(0, nx, slab):
            i1 = min(i0 + slab, nx)
            centers = self.voxel_centers_slab(i0, i1)
            if vectors is not None:
                centers = centers + vectors[i0 * plane: i1 * plane]
            (s, w_l), ok = live._trilinear(centers, (live.tsdf, live.weight))
            if not ok.any():
                continue
            sel = np.nonzero(ok)[0]
            flat = i0 * plane + sel
            w_g = weight_flat[flat].astype(np.float64)
            den = w_g + w_l[sel]
            blended = (w_g * tsdf_flat[flat] + w_l[sel] * s[sel]) / den
            # zero-weight prior adopts the live sample exactly
            blended = np.where(w_g == 0.0, s[sel], blended)
            tsdf_flat[flat] = blended.astype(np.float32)
            weight_flat[flat] = np.minimum(den, self.weight_cap).astype(np.float32)


# ----------------------------------------------------------------------
# mesh extraction


def extract_mesh(vol: TsdfVolume) -> TriangleMesh:
    """Marching cubes at isolevel 0 over observed voxels.

    Cells with any never-observed corner are skipped; vertices sit at linearly
    interpolated zero crossings along cell edges, in world coordinates.
    """
    val = vol.tsdf.astype(np.float64)
    obs = vol.weight > 0
    nx, ny, nz = vol.resolution

    inside = val < 0.0
    cube = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.uint16)
    corner_shifts = [  # standard corner numbering v0..v7
        (0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
        (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1),
    ]
    cell_obs = np.ones_like(cube, dtype=bool)
    for bit, (dx, dy, dz) in enumerate(corner_shifts):
        sub_in = inside[dx: nx - 1 + dx, dy: ny - 1 + dy, dz: nz - 1 + dz]
        cube |= sub_in.astype(np.uint16) << bit
        cell_obs &= obs[dx: nx - 1 + dx, dy: ny - 1 + dy, dz: nz - 1 + dz]

    active = cell_obs & (_EDGE_TABLE[cube] != 0)
    ci, cj, ck = np.nonzero(active)
    if len(ci) == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    tris_local = _TRI_TABLE[cube[ci, cj, ck]]  # (A, 15), entries -1 or edge id
    used = tris_local >= 0

    # Global edge key: axis(0=x,1=y,2=z) low-corner grid index, linearized.
    axis = _EDGE_AXIS[np.clip(tris_local, 0, None)]
    off = _EDGE_OFFSET[np.clip(tris_local, 0, None)]
    gi = ci[:, None] + off[:, :, 0]
    gj = cj[:, None] + off[:, :, 1]
    gk = ck[:, None] + off[:, :, 2]
    key = ((axis * nx + gi) * ny + gj) * nz + gk
    key[~used] = -1

    flat_keys = key[used]
    uniq, inv = np.unique(flat_keys, return_inverse=True)

    # Interpolate a vertex for each used global edge.
    e_axis = uniq // (nx * ny * nz)
    rem = uniq % (nx * ny * nz)
    e_i = rem // (ny * nz)
    e_j = (rem // nz) % ny
    e_k = rem % nz
    p0 = vol.origin + np.column_stack([e_i, e_j, e_k]) * vol.voxel_size
    hi_i = e_i + (e_axis == 0)
    hi_j = e_j + (e_axis == 1)
    hi_k = e_k + (e_axis == 2)
    v0 = val[e_i, e_j, e_k]
    v1 = val[hi_i, hi_j, hi_k]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(v1 == v0, 0.5, v0 / (v0 - v1))
    t = np.clip(t, 0.0, 1.0)
    verts = p0.copy()
    verts[np.arange(len(uniq)), e_axis] += t * vol.voxel_size

    tri_vertex = np.full(tris_local.shape, -1, dtype=np.int64)
    tri_vertex[used] = inv
    triangles = tri_vertex.reshape(-1, 3)
    triangles = triangles[triangles[:, 0] >= 0]
    return TriangleMesh(verts, triangles)


# ----------------------------------------------------------------------
# mesh-to-mesh error


def _closest_point_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Exact distance from points p to triangles (a, b, c), elementwise."""
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = va + vb + vc
        u = np.nan_to_num(vb / denom)
        w = np.nan_to_num(vc / denom)

    closest = a + u[:, None] * ab + w[:, None] * ac  # interior (default)
    on_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    closest = np.where(on_bc[:, None], b + np.nan_to_num(t_bc)[:, None] * (c - b), closest)
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    closest = np.where(on_ac[:, None], a + np.nan_to_num(t_ac)[:, None] * ac, closest)
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    closest = np.where(on_ab[:, None], a + np.nan_to_num(t_ab)[:, None] * ab, closest)
    at_c = (d6 >= 0) & (d5 <= d6)
    closest = np.where(at_c[:, None], c, closest)
    at_b = (d3 >= 0) & (d4 <= d3)
    closest = np.where(at_b[:, None], b, closest)
    at_a = (d1 <= 0) & (d2 <= 0)
    closest = np.where(at_a[:, None], a, closest)
    return np.linalg.norm(p - closest, axis=1)


def _min_distance_per_query(queries, tri_a, tri_b, tri_c, cand_lists):
    """Exact min point-to-triangle distance for per-query candidate triangle lists."""
    counts = np.fromiter((len(c) for c in cand_lists), dtype=np.int64, count=len(cand_lists))
    qi = np.repeat(np.arange(len(cand_lists)), counts)
    ti = np.concatenate(cand_lists) if len(cand_lists) else np.zeros(0, dtype=np.int64)
    d = _closest_point_distance(queries[qi], tri_a[ti], tri_b[ti], tri_c[ti])
    out = np.full(len(cand_lists), np.inf)
    np.minimum.at(out, qi, d)
    return out


def mesh_error(reconstructed: TriangleMesh, reference: TriangleMesh,
               k_candidates: int = 16) -> Tuple[float, np.ndarray]:
    """Mean and per-vertex distance from reconstructed vertices to the
    reference surface (exact point-to-triangle, centroid-tree accelerated)."""
    if reconstructed.is_empty() or reference.is_empty():
        raise ValueError("empty mesh")
    queries = reconstructed.vertices
    tri = reference.triangles
    tri_a = reference.vertices[tri[:, 0]]
    tri_b = reference.vertices[tri[:, 1]]
    tri_c = reference.vertices[tri[:, 2]]
    centroids = (tri_a + tri_b + tri_c) / 3.0
    radius = np.maximum.reduce([
        np.linalg.norm(tri_a - centroids, axis=1),
        np.linalg.norm(tri_b - centroids, axis=1),
        np.linalg.norm(tri_c - centroids, axis=1),
    ])
    r_max = float(radius.max())
    tree = cKDTree(centroids)

    k = min(k_candidates, len(tri))
    d_cent, idx = tree.query(queries, k=k)
    d_cent = np.atleast_2d(d_cent.reshape(len(queries), -1))
    idx = np.atleast_2d(idx.reshape(len(queries), -1))

    flat_q = np.repeat(np.arange(len(queries)), k)
    d = _closest_point_distance(
        queries[flat_q], tri_a[idx.ravel()], tri_b[idx.ravel()], tri_c[idx.ravel()]
    )
    d_hat = np.full(len(queries), np.inf)
    np.minimum.at(d_hat, flat_q, d)

    # A triangle can only beat d_hat if its centroid lies within d_hat + r_max;
    # queries whose k-th centroid already exceeds that bound are settled.
    unresolved = d_cent[:, -1] < d_hat + r_max
    if k == len(tri):
        unresolved[:] = False
    if unresolved.any():
        uq = np.nonzero(unresolved)[0]
        balls = tree.query_ball_point(queries[uq], d_hat[uq] + r_max)
        cand = [np.asarray(b, dtype=np.int64) for b in balls]
        d_hat[uq] = np.minimum(
            d_hat[uq], _min_distance_per_query(queries[uq], tri_a, tri_b, tri_c, cand)
        )
    return float(d_hat.mean()), d_hat


# ----------------------------------------------------------------------
# volume checkpoints

_HEADER = struct.Struct("<iii5d")  # nx ny nz voxel_size origin_xyz truncation


def save_volume(path, vol: TsdfVolume):
    """Raw binary checkpoint: header + little-endian float32 tsdf and weight arrays."""
    with open(path, "wb") as f:
        f.write(_HEADER.pack(*vol.resolution, vol.voxel_size, *vol.origin, vol.truncation))
        f.write(vol.tsdf.astype("<f4").tobytes(order="C"))
        f.write(vol.weight.astype("<f4").tobytes(order="C"))


def load_volume(path) -> TsdfVolume:
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError("truncated volume checkpoint")
        nx, ny, nz, voxel, ox, oy, oz, trunc = _HEADER.unpack(head)
        if abs(trunc - TRUNCATION_VOXELS * voxel) > 1e-12:
            raise ValueError("checkpoint truncation is not 4x voxel size")
        count = nx * ny * nz
        data = np.frombuffer(f.read(count * 4 * 2), dtype="<f4")
        if len(data) != count * 2:
            raise ValueError("truncated volume checkpoint")
    tsdf = data[:count].reshape(nx, ny, nz).copy()
    weight = data[count:].reshape(nx, ny, nz).copy()
    return TsdfVolume((nx, ny, nz), voxel, np.array([ox, oy, oz]), tsdf, weight)
