"""PLY reading and writing for point clouds, flow fields, and triangle meshes.

Supports ASCII and binary little-endian files. Recognized vertex properties:
x,y,z positions, nx,ny,nz normals, red,green,blue colors (uchar or float),
fx,fy,fz flow vectors, and a scalar quality channel.
"""

from __future__ import annotations

import struct
from typing import Dict, List, Optional, Tuple

import numpy as np

from .geometry import FlowField, PointCloud

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


class PlyParseError(ValueError):
    pass


def _parse_header(data: bytes):
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise PlyParseError("not a PLY file")
    header = data[: end + len(b"end_header\n")].decode("ascii", errors="replace")
    body = data[end + len(b"end_header\n"):]
    fmt = None
    elements: List[Tuple[str, int, list]] = []
    for line in header.splitlines():
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise PlyParseError("property before element")
            if tok[1] == "list":
                elements[-1][2].append((tok[4], "list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]))
            else:
                elements[-1][2].append((tok[2], "scalar", _PLY_TYPES[tok[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise PlyParseError(f"unsupported PLY format: {fmt}")
    return fmt, elements, body


def _read_binary_element(body: memoryview, count: int, props: list):
    has_list = any(p[1] == "list" for p in props)
    if not has_list:
        dtype = np.dtype([(p[0], "<" + p[2]) for p in props])
        nbytes = dtype.itemsize * count
        arr = np.frombuffer(body[:nbytes], dtype=dtype).copy()
        return {p[0]: arr[p[0]] for p in props}, nbytes
    # Single list property (face element): fast path for uniform counts.
    if len(props) != 1:
        raise PlyParseError("mixed list/scalar element properties unsupported")
    name, _, cnt_t, val_t = props[0]
    cnt_dt = np.dtype("<" + cnt_t)
    val_dt = np.dtype("<" + val_t)
    if count == 0:
        return {name: np.zeros((0, 3), dtype=np.int64)}, 0
    first = int(np.frombuffer(body[: cnt_dt.itemsize], dtype=cnt_dt)[0])
    row = cnt_dt.itemsize + first * val_dt.itemsize
    nbytes = row * count
    raw = np.frombuffer(body[:nbytes], dtype=np.uint8).reshape(count, row)
    counts = raw[:, : cnt_dt.itemsize].copy().view(cnt_dt).ravel()
    if not (counts == first).all():
        raise PlyParseError("variable-length face lists unsupported")
    vals = raw[:, cnt_dt.itemsize:].copy().view(val_dt).reshape(count, first)
    return {name: vals.astype(np.int64)}, nbytes


def _read_ascii_element(lines: list, start: int, count: int, props: list):
    has_list = any(p[1] == "list" for p in props)
    out: Dict[str, list] = {p[0]: [] for p in props}
    for i in range(count):
        tok = lines[start + i].split()
        if has_list:
            name = props[0][0]
            n = int(tok[0])
            out[name].append([int(v) for v in tok[1: 1 + n]])
        else:
            for j, p in enumerate(props):
                out[p[0]].append(float(tok[j]))
    res = {}
    for p in props:
        if p[1] == "list":
            res[p[0]] = np.asarray(out[p[0]], dtype=np.int64)
        else:
            res[p[0]] = np.asarray(out[p[0]], dtype=np.dtype(p[2]))
    return res, start + count


def read_ply(path) -> Dict[str, Dict[str, np.ndarray]]:
    """Parse a PLY file into {element_name: {property: array}}."""
    with open(path, "rb") as f:
        data = f.read()
    fmt, elements, body = _parse_header(data)
    result: Dict[str, Dict[str, np.ndarray]] = {}
    if fmt == "binary_little_endian":
        view = memoryview(body)
        offset = 0
        for name, count, props in elements:
            vals, nbytes = _read_binary_element(view[offset:], count, props)
            result[name] = vals
            offset += nbytes
    else:
        lines = body.decode("ascii").splitlines()
        pos = 0
        for name, count, props in elements:
            vals, pos = _read_ascii_element(lines, pos, count, props)
            result[name] = vals
    return result


def _gather3(elem: Dict[str, np.ndarray], names: Tuple[str, str, str]) -> Optional[np.ndarray]:
    if all(n in elem for n in names):
        return np.column_stack([np.asarray(elem[n], dtype=np.float64) for n in names])
    return None


def _colors_from(elem: Dict[str, np.ndarray]) -> Optional[np.ndarray]:
    rgb = _gather3(elem, ("red", "green", "blue"))
    if rgb is None:
        return None
    if elem["red"].dtype.kind == "u":
        rgb = rgb / 255.0
    return np.clip(rgb, 0.0, 1.0)


def read_point_cloud(path) -> PointCloud:
    elem = read_ply(path).get("vertex")
    if elem is None:
        raise PlyParseError("PLY file has no vertex element")
    pts = _gather3(elem, ("x", "y", "z"))
    if pts is None:
        raise PlyParseError("vertex element lacks x,y,z")
    return PointCloud(pts, normals=_gather3(elem, ("nx", "ny", "nz")), colors=_colors_from(elem))


def read_flow(path) -> Tuple[PointCloud, FlowField]:
    """Read a flow file: positions x,y,z paired with vectors fx,fy,fz."""
    elem = read_ply(path).get("vertex")
    if elem is None:
        raise PlyParseError("PLY file has no vertex element")
    pts = _gather3(elem, ("x", "y", "z"))
    flow = _gather3(elem, ("fx", "fy", "fz"))
    if pts is None or flow is None:
        raise PlyParseError("flow PLY needs x,y,z,fx,fy,fz properties")
    return PointCloud(pts), FlowField(flow)


def read_mesh(path):
    from .tsdf import TriangleMesh

    data = read_ply(path)
    elem = data.get("vertex")
    if elem is None:
        raise PlyParseError("PLY file has no vertex element")
    pts = _gather3(elem, ("x", "y", "z"))
    faces = data.get("face", {}).get("vertex_indices")
    if faces is None:
        faces = data.get("face", {}).get("vertex_index")
    if faces is None:
        faces = np.zeros((0, 3), dtype=np.int64)
    quality = None
    if "quality" in elem:
        quality = np.asarray(elem["quality"], dtype=np.float64)
    return TriangleMesh(vertices=pts, triangles=np.asarray(faces, dtype=np.int64), vertex_quality=quality)


def _write(path, elements, binary: bool):
    """elements: list of (name, [(prop_name, array, ply_type)], list_prop or None)."""
    lines = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0"]
    for name, props, list_prop in elements:
        count = len(props[0][1]) if props else len(list_prop[1])
        lines.append(f"element {name} {count}")
        for pname, _, ptype in props:
            lines.append(f"property {ptype} {pname}")
        if list_prop is not None:
            lines.append(f"property list uchar int {list_prop[0]}")
    lines.append("end_header")
    header = ("\n".join(lines) + "\n").encode("ascii")

    with open(path, "wb") as f:
        f.write(header)
        for name, props, list_prop in elements:
            if list_prop is None:
                np_types = {"float": "<f4", "double": "<f8", "uchar": "u1", "int": "<i4"}
                cols = [np.asarray(a, dtype=np_types[t]) for _, a, t in props]
                if binary:
                    rec = np.rec.fromarrays(cols, names=[p[0] for p in props])
                    f.write(rec.tobytes())
                else:
                    for i in range(len(cols[0])):
                        f.write((" ".join(_fmt_ascii(c[i]) for c in cols) + "\n").encode("ascii"))
            else:
                faces = np.asarray(list_prop[1], dtype=np.int64)
                if binary:
                    rec = np.empty(len(faces), dtype=[("n", "u1"), ("idx", "<i4", (faces.shape[1],))])
                    rec["n"] = faces.shape[1]
                    rec["idx"] = faces
                    f.write(rec.tobytes())
                else:
                    for row in faces:
                        f.write((f"{len(row)} " + " ".join(str(int(v)) for v in row) + "\n").encode("ascii"))


def _fmt_ascii(v) -> str:
    if isinstance(v, (np.integer, int)):
        return str(int(v))
    return repr(float(v))


def _vertex_props(points, normals=None, colors=None, flow=None, quality=None):
    props = [("x", points[:, 0], "double"), ("y", points[:, 1], "double"), ("z", points[:, 2], "double")]
    if normals is not None:
        props += [("nx", normals[:, 0], "double"), ("ny", normals[:, 1], "double"), ("nz", normals[:, 2], "double")]
    if flow is not None:
        props += [("fx", flow[:, 0], "double"), ("fy", flow[:, 1], "double"), ("fz", flow[:, 2], "double")]
    if quality is not None:
        props.append(("quality", quality, "double"))
    if colors is not None:
        rgb = np.clip(np.rint(np.asarray(colors) * 255.0), 0, 255).astype(np.uint8)
        props += [("red", rgb[:, 0], "uchar"), ("green", rgb[:, 1], "uchar"), ("blue", rgb[:, 2], "uchar")]
    return props


def write_point_cloud(path, cloud: PointCloud, binary: bool = True):
    props = _vertex_props(cloud.points, normals=cloud.normals, colors=cloud.colors)
    _write(path, [("vertex", props, None)], binary)


def write_flow(path, cloud: PointCloud, flow: FlowField, binary: bool = True):
    if len(cloud) != len(flow):
        raise ValueError("flow length does not match cloud")
    props = _vertex_props(cloud.points, flow=flow.vectors)
    _write(path, [("vertex", props, None)], binary)


def write_mesh(path, mesh, binary: bool = True, colors: Optional[np.ndarray] = None):
    props = _vertex_props(mesh.vertices, colors=colors, quality=mesh.vertex_quality)
    _write(path, [("vertex", props, None), ("face", [], ("vertex_indices", mesh.triangles))], binary)
