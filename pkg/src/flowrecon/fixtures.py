"""Synthetic scene and fixture generation: analytic depth renders, SDF
volumes, reference meshes, and a deforming test sequence with known flow."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .geometry import FlowField, PointCloud
from .tsdf import DepthMap, Intrinsics, TsdfVolume, TriangleMesh, write_depth_png, write_intrinsics

DEFAULT_INTRINSICS = Intrinsics(fx=120.0, fy=120.0, cx=79.5, cy=59.5, width=160, height=120)


def _pixel_rays(k: Intrinsics) -> np.ndarray:
    """Unnormalized ray directions (x/z, y/z, 1) through every pixel center."""
    u, v = np.meshgrid(np.arange(k.width), np.arange(k.height), indexing="xy")
    return np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u, dtype=np.float64)], axis=-1)


def sphere_depth(center, radius: float, k: Intrinsics,
                 background: Optional[DepthMap] = None) -> DepthMap:
    """Analytic z-depth of a sphere seen from a camera at the origin (+z forward)."""
    c = np.asarray(center, dtype=np.float64)
    d = _pixel_rays(k)
    a = np.einsum("hwi,hwi->hw", d, d)
    b = -2.0 * np.einsum("hwi,i->hw", d, c)
    cc = float(c @ c - radius * radius)
    disc = b * b - 4.0 * a * cc
    hit = disc >= 0
    t = np.zeros_like(a)
    t[hit] = (-b[hit] - np.sqrt(disc[hit])) / (2.0 * a[hit])
    depth = np.where(hit & (t > 0), t, 0.0)
    if background is not None:
        bg = background.depth
        depth = np.where(depth > 0, np.where((bg > 0) & (bg < depth), bg, depth), bg)
    return DepthMap(depth, k)


def wall_depth(z: float, k: Intrinsics, half_extent: float = np.inf) -> DepthMap:
    """Flat wall at constant z-depth, optionally cropped to |x|,|y| <= half_extent."""
    d = _pixel_rays(k)
    depth = np.full((k.height, k.width), z)
    keep = (np.abs(d[..., 0] * z) <= half_extent) & (np.abs(d[..., 1] * z) <= half_extent)
    return DepthMap(np.where(keep, depth, 0.0), k)


def sphere_mesh(center, radius: float, rings: int = 48, segments: int = 96) -> TriangleMesh:
    """UV-sphere with all vertices exactly on the sphere surface."""
    c = np.asarray(center, dtype=np.float64)
    verts = [c + np.array([0.0, 0.0, radius]), c + np.array([0.0, 0.0, -radius])]
    for i in range(1, rings):
        theta = np.pi * i / rings
        for j in range(segments):
            phi = 2 * np.pi * j / segments
            verts.append(c + radius * np.array([
                np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta),
            ]))
    verts = np.asarray(verts)

    def ring_idx(i, j):
        return 2 + (i - 1) * segments + (j % segments)

    tris = []
    for j in range(segments):
        tris.append([0, ring_idx(1, j), ring_idx(1, j + 1)])
        tris.append([1, ring_idx(rings - 1, j + 1), ring_idx(rings - 1, j)])
    for i in range(1, rings - 1):
        for j in range(segments):
            a, b = ring_idx(i, j), ring_idx(i, j + 1)
            c2, d2 = ring_idx(i + 1, j), ring_idx(i + 1, j + 1)
            tris.append([a, c2, b])
            tris.append([b, c2, d2])
    return TriangleMesh(verts, np.asarray(tris, dtype=np.int64))


def plane_mesh(z: float, half_extent: float, n: int = 20) -> TriangleMesh:
    """Triangulated square wall patch at constant z."""
    xs = np.linspace(-half_extent, half_extent, n)
    xx, yy = np.meshgrid(xs, xs, indexing="ij")
    verts = np.column_stack([xx.ravel(), yy.ravel(), np.full(n * n, z)])
    tris = []
    for i in range(n - 1):
        for j in range(n - 1):
            a = i * n + j
            tris.append([a, a + n, a + 1])
            tris.append([a + 1, a + n, a + n + 1])
    return TriangleMesh(verts, np.asarray(tris, dtype=np.int64))


def _room_planes(box_lo, box_hi):
    """Back wall plus four slanted side planes of a room interior. An object
    moving through the room can occlude at most one side at a time, so rigid
    tracking always keeps anchor geometry in every direction."""
    lo = np.asarray(box_lo, dtype=np.float64)
    hi = np.asarray(box_hi, dtype=np.float64)
    z_mid = 0.5 * (lo[2] + hi[2])
    return [
        (np.array([0.0, 0.0, 1.0]), hi[2] - 0.03),
        (np.array([0.0, 1.0, 0.45]), (hi[1] - 0.02) + 0.45 * z_mid),
        (np.array([0.0, -1.0, 0.45]), -(lo[1] + 0.02) + 0.45 * z_mid),
        (np.array([1.0, 0.0, 0.45]), (lo[0] + 0.02) + 0.45 * z_mid),
        (np.array([-1.0, 0.0, 0.45]), -(hi[0] - 0.02) + 0.45 * z_mid),
    ]


def corner_scene_depth(k: Intrinsics, box_lo, box_hi) -> DepthMap:
    """Box-room interior depth (back wall plus four slanted sides), cropped to
    the box. Planar everywhere, so the projective TSDF is exactly trilinear
    and all six pose degrees of freedom are observable."""
    lo = np.asarray(box_lo, dtype=np.float64)
    hi = np.asarray(box_hi, dtype=np.float64)
    planes = _room_planes(lo, hi)
    d = _pixel_rays(k)
    best = np.full(d.shape[:2], np.inf)
    for n, c in planes:
        denom = d @ n
        hit = np.abs(denom) > 1e-12
        t = np.where(hit, c / np.where(hit, denom, 1.0), -1.0)
        pts = d * np.where(hit, t, 0.0)[..., None]
        ok = hit & (t > 0.05) & np.all(pts >= lo, axis=-1) & np.all(pts <= hi, axis=-1)
        best = np.where(ok & (t < best), t, best)
    best[~np.isfinite(best)] = 0.0
    return DepthMap(best, k)


def corner_cloud(n_per_side: int = 10, corner=(1.0, 1.0, 1.0), extent: float = 0.5) -> PointCloud:
    """Noise-free three-plane corner: patches on x=cx, y=cy, z=cz."""
    c = np.asarray(corner, dtype=np.float64)
    ticks = np.linspace(0.0, extent, n_per_side)
    a, b = np.meshgrid(ticks, ticks, indexing="ij")
    a, b = a.ravel(), b.ravel()
    planes = [
        np.column_stack([np.full_like(a, c[0]), c[1] + a, c[2] + b]),
        np.column_stack([c[0] + a, np.full_like(a, c[1]), c[2] + b]),
        np.column_stack([c[0] + a, c[1] + b, np.full_like(a, c[2])]),
    ]
    return PointCloud(np.vstack(planes))


def plane_sdf_volume(resolution, voxel_size: float, origin, plane_z: float,
                     weight: float = 1.0) -> TsdfVolume:
    """Analytic TSDF of the half-space below z = plane_z (inside is z > plane_z)."""
    vol = TsdfVolume(resolution, voxel_size, origin)
    zs = origin[2] + np.arange(resolution[2]) * voxel_size
    sdf = np.clip((plane_z - zs) / vol.truncation, -1.0, 1.0)
    vol.tsdf[:] = np.broadcast_to(sdf, resolution).astype(np.float32)
    vol.weight[:] = weight
    return vol


def sphere_sdf_volume(resolution, voxel_size: float, origin, center, radius: float,
                      weight: float = 1.0) -> TsdfVolume:
    """Analytic TSDF of a sphere (negative inside)."""
    vol = TsdfVolume(resolution, voxel_size, origin)
    xs = origin[0] + np.arange(resolution[0]) * voxel_size
    ys = origin[1] + np.arange(resolution[1]) * voxel_size
    zs = origin[2] + np.arange(resolution[2]) * voxel_size
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    c = np.asarray(center, dtype=np.float64)
    dist = np.sqrt((gx - c[0]) ** 2 + (gy - c[1]) ** 2 + (gz - c[2]) ** 2) - radius
    vol.tsdf[:] = np.clip(dist / vol.truncation, -1.0, 1.0).astype(np.float32)
    vol.weight[:] = weight
    return vol


# ----------------------------------------------------------------------
# deforming-scene sequence (swinging, pulsating sphere in front of a corner)


def deforming_scene_params():
    resolution = (64, 64, 56)
    voxel = 0.005
    origin = np.array([-0.16, -0.16, 0.30])
    hi = origin + (np.array(resolution) - 1) * voxel
    return {
        "frames": 24,
        # 0.1 mm depth quantization: plane terracing at mm steps is visible
        # to the sub-voxel tracking these scenes exercise
        "intrinsics": Intrinsics(fx=90.0, fy=90.0, cx=49.5, cy=37.0, width=100, height=75,
                                 depth_scale=10000.0),
        "resolution": resolution,
        "voxel_size": voxel,
        "origin": origin,
        "box_lo": origin + voxel,
        "box_hi": hi - voxel,
        "center0": np.array([0.0, -0.02, 0.40]),
        "radius0": 0.055,
        "swing": 0.03,
        "pulse": 0.12,
    }


def deforming_sphere_state(frame: int, params=None):
    """Sphere center and radius at a frame: lateral swing plus radius pulse."""
    p = params or deforming_scene_params()
    phase = 2.0 * np.pi * frame / p["frames"]
    center = p["center0"] + np.array([p["swing"] * np.sin(phase), 0.0, 0.0])
    radius = p["radius0"] * (1.0 + p["pulse"] * np.sin(2.0 * phase))
    return center, radius


def deforming_frame_depth(frame: int, params=None) -> DepthMap:
    p = params or deforming_scene_params()
    background = corner_scene_depth(p["intrinsics"], p["box_lo"], p["box_hi"])
    center, radius = deforming_sphere_state(frame, p)
    return sphere_depth(center, radius, p["intrinsics"], background=background)


def deforming_frame_flow(points: np.ndarray, frame: int, params=None) -> FlowField:
    """Ground-truth flow from a frame's surface points back to the canonical
    (frame 0) geometry: sphere points map radially through the canonical
    sphere; corner points are static."""
    p = params or deforming_scene_params()
    center, radius = deforming_sphere_state(frame, p)
    c0, r0 = p["center0"], p["radius0"]
    rel = points - center
    dist = np.linalg.norm(rel, axis=1)
    # exact fixture data sits exactly on the sphere; the corner stays well
    # outside this band for every frame
    on_sphere = np.abs(dist - radius) < 0.15 * radius
    flow = np.zeros_like(points)
    scale = np.where(dist > 0, r0 / np.maximum(dist, 1e-12), 0.0)
    target = c0 + rel * scale[:, None]
    flow[on_sphere] = target[on_sphere] - points[on_sphere]
    return FlowField(flow)


def _grid_patch(point_fn, us, vs) -> TriangleMesh:
    uu, vv = np.meshgrid(us, vs, indexing="ij")
    verts = point_fn(uu.ravel(), vv.ravel())
    n_u, n_v = len(us), len(vs)
    tris = []
    for i in range(n_u - 1):
        for j in range(n_v - 1):
            a = i * n_v + j
            tris.append([a, a + n_v, a + 1])
            tris.append([a + 1, a + n_v, a + n_v + 1])
    return TriangleMesh(verts, np.asarray(tris, dtype=np.int64))


def corner_scene_mesh(box_lo, box_hi, n: int = 40) -> TriangleMesh:
    """Analytic triangulation of the room planes inside the box."""
    lo = np.asarray(box_lo, dtype=np.float64)
    hi = np.asarray(box_hi, dtype=np.float64)
    meshes = []
    for normal, c in _room_planes(lo, hi):
        if normal[2] == 1.0:  # back wall: z constant
            meshes.append(_grid_patch(
                lambda u, v: np.column_stack([u, v, np.full_like(u, c)]),
                np.linspace(lo[0], hi[0], n), np.linspace(lo[1], hi[1], n),
            ))
            continue
        axis = 0 if normal[0] != 0 else 1  # the slanted coordinate
        sign = normal[axis]
        other = 1 - axis
        # parameterize by (other coordinate, z), over the z range where the
        # slanted coordinate w = sign * (c - 0.45 z) stays inside the box
        zs = np.linspace(lo[2], hi[2], 4 * n)
        ws = sign * (c - 0.45 * zs)
        keep = (ws >= lo[axis]) & (ws <= hi[axis])
        if not keep.any():
            continue
        zs = np.linspace(zs[keep].min(), zs[keep].max(), n)

        def point_fn(u, v, axis=axis, sign=sign, c=c):
            w = sign * (c - 0.45 * v)
            cols = [None, None, None]
            cols[axis] = w
            cols[1 - axis] = u
            cols[2] = v
            return np.column_stack(cols)

        meshes.append(_grid_patch(
            point_fn, np.linspace(lo[other], hi[other], n), zs,
        ))
    verts = np.vstack([m.vertices for m in meshes])
    offsets = np.cumsum([0] + [len(m.vertices) for m in meshes[:-1]])
    tris = np.vstack([m.triangles + off for m, off in zip(meshes, offsets)])
    return TriangleMesh(verts, tris)


def canonical_scene_mesh(params=None) -> TriangleMesh:
    """Analytic reference mesh of the canonical (frame 0) deforming scene."""
    p = params or deforming_scene_params()
    sphere = sphere_mesh(p["center0"], p["radius0"])
    corner = corner_scene_mesh(p["box_lo"], p["box_hi"])
    verts = np.vstack([sphere.vertices, corner.vertices])
    tris = np.vstack([sphere.triangles, corner.triangles + len(sphere.vertices)])
    return TriangleMesh(verts, tris)


def kitti_style_cloud(seed: int = 0, n: int = 4096) -> Tuple[PointCloud, FlowField]:
    """Road-scene-scale random cloud and flow for rescaling tests."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform([-40.0, -20.0, 0.0], [40.0, 20.0, 80.0], size=(n, 3))
    flow = rng.normal(scale=0.5, size=(n, 3))
    return PointCloud(pts), FlowField(flow)


def write_deforming_sequence(outdir, frames: Optional[int] = None, with_flow: bool = True,
                             params=None):
    """Write the deforming-scene depth PNGs, intrinsics, flow files, and
    reference mesh under ``outdir``."""
    from .ply import write_flow, write_mesh
    from .tsdf import backproject, read_depth_png

    p = dict(params or deforming_scene_params())
    if frames is not None:
        p["frames"] = frames
    out = Path(outdir)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    write_intrinsics(out / "intrinsics.txt", p["intrinsics"])
    if with_flow:
        (out / "flow").mkdir(exist_ok=True)
    for n in range(p["frames"]):
        depth = deforming_frame_depth(n, p)
        path = out / "depth" / f"depth_{n:06d}.png"
        write_depth_png(path, depth)
        if with_flow and n > 0:
            # backproject the stored (quantized) depth so the flow rows match
            # the pipeline's live cloud positions exactly
            cloud = backproject(read_depth_png(path, p["intrinsics"]))
            flow = deforming_frame_flow(cloud.points, n, p)
            write_flow(out / "flow" / f"flow_{n:06d}.ply", cloud, flow)
    write_mesh(out / "reference.ply", canonical_scene_mesh(p))
    return p


def write_static_wall_sequence(outdir, frames: int = 10, wall_z: float = 0.5,
                               half_extent: float = 0.2,
                               intrinsics: Optional[Intrinsics] = None):
    """Write a static flat-wall depth sequence plus its reference mesh.

    A lone frontal wall leaves point-to-plane ICP rank-deficient, so frames
    after the first exercise the documented tracking-loss (skip) policy."""
    from .ply import write_mesh

    k = intrinsics or DEFAULT_INTRINSICS
    out = Path(outdir)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    write_intrinsics(out / "intrinsics.txt", k)
    depth = wall_depth(wall_z, k, half_extent)
    for n in range(frames):
        write_depth_png(out / "depth" / f"depth_{n:06d}.png", depth)
    write_mesh(out / "reference.ply", plane_mesh(wall_z, half_extent))
    return k


def write_static_corner_sequence(outdir, frames: int = 10, params=None):
    """Write a static corner-scene depth sequence (fully trackable) plus its
    reference mesh; grid geometry matches the deforming scene."""
    from .ply import write_mesh

    p = params or deforming_scene_params()
    k = p["intrinsics"]
    out = Path(outdir)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    write_intrinsics(out / "intrinsics.txt", k)
    depth = corner_scene_depth(k, p["box_lo"], p["box_hi"])
    for n in range(frames):
        write_depth_png(out / "depth" / f"depth_{n:06d}.png", depth)
    write_mesh(out / "reference.ply", corner_scene_mesh(p["box_lo"], p["box_hi"]))
    return p
