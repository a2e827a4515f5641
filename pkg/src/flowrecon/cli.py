"""Command-line front end: metrics, losses, rescaling, reconstruction,
mesh-error reports, and synthetic fixture generation."""

from __future__ import annotations

import argparse
import configparser
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from . import __version__
from .geometry import FlowField, PointCloud, build_index, estimate_normals
from .icp import IcpConfig, IcpError
from .integrator import (
    FlowSource,
    FrameDiagnostics,
    PipelineConfig,
    ReconstructionState,
    RefineConfig,
    reconstruct_step,
)
from .losses import LossWeights, combined_loss
from .metrics import MetricReport, compute_metrics
from .ply import read_flow, read_mesh, read_point_cloud, write_flow, write_mesh, write_point_cloud
from .tsdf import (
    TsdfVolume,
    extract_mesh,
    mesh_error,
    read_depth_png,
    read_intrinsics,
    save_volume,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class ConfigError(ValueError):
    pass


@dataclass
class SceneConfig:
    depth_dir: Path
    output_dir: Path
    intrinsics_path: Path
    resolution: Tuple[int, int, int]
    voxel_size: float
    origin: np.ndarray
    scale: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    checkpoint_every: int = 25
    icp: IcpConfig = field(default_factory=IcpConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    flow: FlowSource = field(default_factory=FlowSource)
    splat: bool = False

    def echo(self) -> List[str]:
        return [
            f"depth_dir={self.depth_dir}",
            f"output_dir={self.output_dir}",
            f"intrinsics={self.intrinsics_path}",
            f"resolution={','.join(str(n) for n in self.resolution)}",
            f"voxel_size={self.voxel_size}",
            f"origin={','.join(repr(float(v)) for v in self.origin)}",
            f"scale={','.join(repr(float(v)) for v in self.scale)}",
            f"checkpoint_every={self.checkpoint_every}",
            f"flow_source={self.flow.variant}",
            f"refine_alpha={self.refine.step_alpha}",
            f"refine_iterations={self.refine.iterations}",
        ]


def load_scene_config(path) -> SceneConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    cp.read(path)
    try:
        scene = cp["scene"]
        volume = cp["volume"]
        root = path.parent

        def respath(value: str) -> Path:
            p = Path(value)
            return p if p.is_absolute() else root / p

        depth_dir = respath(scene["depth_dir"])
        intrinsics_path = respath(scene["intrinsics"])
        if not depth_dir.is_dir():
            raise ConfigError(f"depth_dir does not exist: {depth_dir}")
        if not intrinsics_path.is_file():
            raise ConfigError(f"intrinsics file does not exist: {intrinsics_path}")
        resolution = tuple(int(v) for v in volume["resolution"].split(","))
        if len(resolution) != 3:
            raise ConfigError("volume resolution must be nx,ny,nz")
        origin = np.array([float(v) for v in volume["origin"].split(",")])

        scale = (1.0, 1.0, 1.0)
        if cp.has_section("rescale"):
            r = cp["rescale"]
            scale = (r.getfloat("sx", 1.0), r.getfloat("sy", 1.0), r.getfloat("sz", 1.0))
        if any(s <= 0 for s in scale):
            raise ConfigError("scale factors must be positive")

        icp = IcpConfig()
        if cp.has_section("icp"):
            s = cp["icp"]
            icp = IcpConfig(
                max_iterations=s.getint("max_iterations", 30),
                convergence_delta=s.getfloat("convergence_delta", 1e-6),
                max_correspondence_dist=s.getfloat("max_correspondence_dist", 0.1),
                min_correspondences=s.getint("min_correspondences", 6),
            )
        refine = RefineConfig()
        if cp.has_section("refine"):
            s = cp["refine"]
            refine = RefineConfig(
                step_alpha=s.getfloat("step_alpha", 0.1),
                iterations=s.getint("iterations", 30),
                active_band=s.getfloat("active_band", 1.0),
                cap_displacement=s.getboolean("cap_displacement", True),
            )
        flow = FlowSource()
        if cp.has_section("flow"):
            s = cp["flow"]
            variant = s.get("source", "zero")
            flow_path = s.get("path", None)
            if flow_path is not None:
                flow_path = str(respath(flow_path))
            flow = FlowSource(
                variant=variant,
                path=flow_path,
                pattern=s.get("pattern", "flow_{frame:06d}.ply"),
            )
        return SceneConfig(
            depth_dir=depth_dir,
            output_dir=respath(scene["output_dir"]),
            intrinsics_path=intrinsics_path,
            resolution=resolution,
            voxel_size=volume.getfloat("voxel_size"),
            origin=origin,
            scale=scale,
            checkpoint_every=cp["scene"].getint("checkpoint_every", 25),
            icp=icp,
            refine=refine,
            flow=flow,
            splat=cp.has_section("render") and cp["render"].getboolean("splat", False),
        )
    except (KeyError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"invalid scene config: {e}") from e


@dataclass
class RunManifest:
    config_echo: list
    rows: List[FrameDiagnostics] = field(default_factory=list)

    def add(self, diag: FrameDiagnostics):
        self.rows.append(diag)

    def write(self, path):
        processed = sum(1 for r in self.rows if r.status != "skipped")
        skipped = len(self.rows) - processed
        with open(path, "w") as f:
            f.write(f"# flowrecon {__version__}\n")
            for line in self.config_echo:
                f.write(f"# {line}\n")
            f.write(f"# frames_total={len(self.rows)} processed={processed} skipped={skipped}\n")
            f.write("frame,status,n_points,icp_residual,icp_iterations,"
                    "energy_first,energy_last,seconds,message\n")
            for r in self.rows:
                e0 = r.refine_energy[0] if len(r.refine_energy) else 0.0
                e1 = r.refine_energy[-1] if len(r.refine_energy) else 0.0
                f.write(f"{r.frame},{r.status},{r.n_points},{r.icp_residual!r},"
                        f"{r.icp_iterations},{e0!r},{e1!r},{r.seconds:.3f},{r.message}\n")


def _load_matched_flows(pred_path, gt_path) -> Tuple[FlowField, FlowField]:
    _, pred = read_flow(pred_path)
    _, gt = read_flow(gt_path)
    if len(pred) != len(gt):
        raise ValueError(f"flow length mismatch: {len(pred)} vs {len(gt)}")
    return pred, gt


def cmd_metrics(args) -> int:
    pred, gt = _load_matched_flows(args.pred, args.gt)
    report = compute_metrics(
        pred, gt, thresholds=(args.t1, args.t2), outlier_threshold=args.outlier_threshold
    )
    sys.stdout.write(report.to_kv_text())
    if args.csv:
        new = not Path(args.csv).exists()
        with open(args.csv, "a") as f:
            if new:
                f.write(MetricReport.csv_header() + "\n")
            f.write(report.to_csv_row() + "\n")
    return EXIT_OK


def _finite_difference_gradient(source, pred, gt, target, index, weights, step=1e-6):
    base = pred.vectors
    fd = np.zeros_like(base)
    for i in range(base.shape[0]):
        for a in range(3):
            hi = base.copy()
            hi[i, a] += step
            lo = base.copy()
            lo[i, a] -= step
            f_hi = combined_loss(source, FlowField(hi), gt, target, index, weights).combined
            f_lo = combined_loss(source, FlowField(lo), gt, target, index, weights).combined
            fd[i, a] = (f_hi - f_lo) / (2.0 * step)
    return fd


def cmd_loss(args) -> int:
    source = read_point_cloud(args.source)
    _, pred = read_flow(args.pred_flow)
    _, gt = read_flow(args.gt_flow)
    target = read_point_cloud(args.target)
    if not target.has_normals():
        target = estimate_normals(target, k=min(16, len(target)))
    index = build_index(target)
    weights = LossWeights(lambda_pp=args.lambda_pp, lambda_cos=args.lambda_cos)
    report = combined_loss(source, pred, gt, target, index, weights)
    print(f"l2={report.l2!r}")
    print(f"point_to_plane={report.point_to_plane!r}")
    print(f"cosine={report.cosine!r}")
    print(f"combined={report.combined!r}")
    if args.check_grad:
        fd = _finite_difference_gradient(source, pred, gt, target, index, weights)
        scale = max(np.abs(fd).max(), 1e-12)
        deviation = float(np.abs(report.gradient.vectors - fd).max() / scale)
        print(f"grad_max_rel_deviation={deviation!r}")
    return EXIT_OK


def _rescale_file(src: Path, dst: Path, factors: np.ndarray):
    data = read_flow(src) if _has_flow(src) else None
    if data is not None:
        cloud, flow = data
        write_flow(dst, PointCloud(cloud.points * factors), FlowField(flow.vectors * factors))
    else:
        cloud = read_point_cloud(src)
        scaled = PointCloud(
            cloud.points * factors,
            colors=cloud.colors,
        )
        write_point_cloud(dst, scaled)


def _has_flow(path: Path) -> bool:
    from .ply import read_ply

    elem = read_ply(path).get("vertex", {})
    return all(n in elem for n in ("fx", "fy", "fz"))


def cmd_rescale(args) -> int:
    if args.sx <= 0 or args.sy <= 0 or args.sz <= 0:
        raise ValueError("scale factors must be positive")
    factors = np.array([args.sx, args.sy, args.sz])
    src, dst = Path(args.input), Path(args.output)
    if src.is_dir():
        dst.mkdir(parents=True, exist_ok=True)
        for f in sorted(src.glob("*.ply")):
            _rescale_file(f, dst / f.name, factors)
    else:
        _rescale_file(src, dst, factors)
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    cfg = load_scene_config(args.config)
    intr = read_intrinsics(cfg.intrinsics_path)
    frames = sorted(cfg.depth_dir.glob("*.png"))
    if not frames:
        raise ConfigError(f"no depth frames in {cfg.depth_dir}")
    cfg.output_dir.mkdir(parents=True, exist_ok=True)

    state = ReconstructionState(
        volume=TsdfVolume(cfg.resolution, cfg.voxel_size, cfg.origin)
    )
    pipeline = PipelineConfig(icp=cfg.icp, refine=cfg.refine, splat=cfg.splat)
    manifest = RunManifest(config_echo=cfg.echo())

    for path in frames:
        frame = state.frame
        try:
            depth = read_depth_png(path, intr)
        except (OSError, ValueError) as e:
            manifest.add(FrameDiagnostics(frame=frame, status="skipped", message=f"unreadable: {e}"))
            state.frame += 1
            continue
        diag = reconstruct_step(state, depth, cfg.flow, pipeline)
        manifest.add(diag)
        if cfg.checkpoint_every > 0 and state.frame % cfg.checkpoint_every == 0:
            mesh = extract_mesh(state.volume)
            write_mesh(cfg.output_dir / f"mesh_{state.frame:06d}.ply", mesh)

    mesh = extract_mesh(state.volume)
    write_mesh(cfg.output_dir / "mesh_final.ply", mesh)
    save_volume(cfg.output_dir / "volume_final.tsdf", state.volume)
    manifest.write(cfg.output_dir / "manifest.csv")
    print(f"frames={len(manifest.rows)} mesh_vertices={len(mesh.vertices)} "
          f"output={cfg.output_dir}")
    return EXIT_OK


def _error_colors(errors_m: np.ndarray, red_at_mm: float = 10.0) -> np.ndarray:
    """Blue (0 mm) to red (>= red_at_mm) linear ramp."""
    t = np.clip(errors_m * 1000.0 / red_at_mm, 0.0, 1.0)
    return np.column_stack([t, np.zeros_like(t), 1.0 - t])


def cmd_mesh_error(args) -> int:
    rec = read_mesh(args.reconstructed)
    ref = read_mesh(args.reference)
    if rec.is_empty() or ref.is_empty():
        raise ValueError("empty mesh")
    mean, per_vertex = mesh_error(rec, ref)
    print(f"mean_error_mm={mean * 1000.0:.3f}")
    if args.heatmap:
        rec.vertex_quality = per_vertex * 1000.0
        write_mesh(args.heatmap, rec, colors=_error_colors(per_vertex))
    return EXIT_OK


def cmd_make_fixtures(args) -> int:
    from . import fixtures
    from .ply import write_mesh as _write_mesh

    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    which = args.which

    if which in ("all", "static-wall"):
        fixtures.write_static_wall_sequence(out / "static_wall", frames=args.frames or 10)
        _write_scene_config(out / "static_wall", resolution=(64, 64, 64),
                            voxel_size=0.008, origin=(-0.256, -0.256, 0.25),
                            flow="zero")
    if which in ("all", "static-corner"):
        params = fixtures.write_static_corner_sequence(
            out / "static_corner", frames=args.frames or 10
        )
        _write_scene_config(out / "static_corner", resolution=params["resolution"],
                            voxel_size=params["voxel_size"], origin=params["origin"],
                            flow="zero")
    if which in ("all", "deforming"):
        params = fixtures.write_deforming_sequence(out / "deforming", frames=args.frames)
        for variant in ("zero", "external", "rigid"):
            _write_scene_config(
                out / "deforming", resolution=params["resolution"],
                voxel_size=params["voxel_size"], origin=params["origin"],
                flow=variant, suffix=f"_{variant}",
            )
    if which in ("all", "spheres"):
        _write_mesh(out / "sphere_r100mm.ply", fixtures.sphere_mesh((0, 0, 0), 0.100))
        _write_mesh(out / "sphere_r101mm.ply", fixtures.sphere_mesh((0, 0, 0), 0.101))
    if which in ("all", "kitti-style"):
        cloud, flow = fixtures.kitti_style_cloud()
        write_flow(out / "kitti_style_flow.ply", cloud, flow)
    print(f"fixtures written under {out}")
    return EXIT_OK


def _write_scene_config(scene_dir: Path, resolution, voxel_size, origin, flow,
                        suffix: str = ""):
    # gradient step scaled by truncation^2 so the descent contracts at this
    # grid scale exactly like the unit-truncation reference fixture
    truncation = 4.0 * voxel_size
    alpha = 0.1 * truncation * truncation
    lines = [
        "[scene]",
        "depth_dir = depth",
        f"output_dir = out{suffix}",
        "intrinsics = intrinsics.txt",
        "checkpoint_every = 25",
        "",
        "[volume]",
        f"resolution = {','.join(str(int(n)) for n in resolution)}",
        f"voxel_size = {voxel_size}",
        f"origin = {','.join(repr(float(v)) for v in origin)}",
        "",
        "[icp]",
        f"max_correspondence_dist = {2.4 * voxel_size}",
        "",
        "[refine]",
        f"step_alpha = {alpha}",
        "iterations = 30",
        "",
        "[flow]",
        f"source = {flow}",
    ]
    if flow == "external":
        lines.append("path = flow")
    (scene_dir / f"scene{suffix}.ini").write_text("\n".join(lines) + "\n")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flowrecon",
                     description="Scene-flow losses, metrics, and dynamic TSDF reconstruction")
    parser.add_argument("--version", action="version", version=f"flowrecon {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("metrics", help="evaluate a predicted flow field against ground truth")
    p.add_argument("pred", help="predicted flow PLY (x,y,z,fx,fy,fz)")
    p.add_argument("gt", help="ground-truth flow PLY")
    p.add_argument("--t1", type=float, default=0.05, help="strict accuracy threshold")
    p.add_argument("--t2", type=float, default=0.10, help="relaxed accuracy threshold")
    p.add_argument("--outlier-threshold", type=float, default=0.3)
    p.add_argument("--csv", help="append a CSV row to this file")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("loss", help="evaluate the combined geometric loss")
    p.add_argument("--source", required=True, help="source point cloud PLY")
    p.add_argument("--pred-flow", required=True)
    p.add_argument("--gt-flow", required=True)
    p.add_argument("--target", required=True, help="target cloud PLY (normals estimated if absent)")
    p.add_argument("--lambda-pp", type=float, default=1.3)
    p.add_argument("--lambda-cos", type=float, default=0.9)
    p.add_argument("--check-grad", action="store_true",
                   help="compare the analytic gradient against finite differences")
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("rescale", help="per-axis rescale of clouds/flows (file or directory)")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--sx", type=float, required=True)
    p.add_argument("--sy", type=float, required=True)
    p.add_argument("--sz", type=float, required=True)
    p.set_defaults(func=cmd_rescale)

    p = sub.add_parser("reconstruct", help="run the reconstruction pipeline from a scene config")
    p.add_argument("config", help="scene .ini config file")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("mesh-error", help="mean distance from a mesh to a reference mesh")
    p.add_argument("reconstructed")
    p.add_argument("reference")
    p.add_argument("--heatmap", help="write per-vertex error PLY (quality in mm, blue->red)")
    p.set_defaults(func=cmd_mesh_error)

    p = sub.add_parser("make-fixtures", help="generate synthetic test scenes")
    p.add_argument("output")
    p.add_argument("--which", default="all",
                   choices=["all", "static-wall", "static-corner", "deforming",
                            "spheres", "kitti-style"])
    p.add_argument("--frames", type=int, default=None)
    p.set_defaults(func=cmd_make_fixtures)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (IcpError, np.linalg.LinAlgError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
