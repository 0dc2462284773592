"""File formats: OFF / ASCII PLY geometry, CSV tables, checkpoints, voxel grids.

Checkpoints are a directory holding ``manifest.json`` and one raw
little-endian float32 blob per parameter block, so parameters round-trip
bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from ..errors import ParseError
from ..extract import Checkpoint, PatchParams
from ..geom import PointCloud, TriMesh
from ..net import Architecture, ConvNetParams
from ..patch import VoxelGrid

CHECKPOINT_FORMAT = "rftransfer-checkpoint/1"
FLOAT_FMT = "%.9g"
# shortest text that round-trips every float64 exactly
GEOM_FMT = "%.17g"


# ---------------------------------------------------------------------------
# Text geometry


def _tokens(path):
    """Yield ``(line_number, tokens)`` for non-empty, non-comment lines."""
    with open(path, "r", encoding="ascii", errors="replace") as fh:
        for no, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if body:
                yield no, body.split()


def _floats(tok, no, n):
    if len(tok) < n:
        raise ParseError(f"expected {n} values, got {len(tok)}", no)
    try:
        return [float(x) for x in tok[:n]]
    except ValueError as exc:
        raise ParseError(str(exc), no) from None


def _face(tok, no):
    try:
        k = int(tok[0])
        idx = [int(x) for x in tok[1:1 + k]]
    except (ValueError, IndexError):
        raise ParseError("malformed face record", no) from None
    if k != 3 or len(idx) != 3:
        raise ParseError(f"only triangles are supported, got a {k}-gon", no)
    return idx


def load_off(path) -> TriMesh:
    it = _tokens(path)
    try:
        no, tok = next(it)
    except StopIteration:
        raise ParseError("empty file", 1) from None
    if tok[0] not in ("OFF", "COFF", "NOFF"):
        raise ParseError("missing OFF header", no)
    tok = tok[1:]
    if not tok:
        try:
            no, tok = next(it)
        except StopIteration:
            raise ParseError("missing element counts", no + 1) from None
    try:
        nv, nf = int(tok[0]), int(tok[1])
    except (ValueError, IndexError):
        raise ParseError("malformed element counts", no) from None
    verts, faces = [], []
    last = no
    for _ in range(nv):
        try:
            last, tok = next(it)
        except StopIteration:
            raise ParseError(f"file truncated: expected {nv} vertices, got {len(verts)}", last + 1) from None
        verts.append(_floats(tok, last, 3))
    for _ in range(nf):
        try:
            last, tok = next(it)
        except StopIteration:
            raise ParseError(f"file truncated: expected {nf} faces, got {len(faces)}", last + 1) from None
        faces.append(_face(tok, last))
    try:
        return TriMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))
    except ValueError as exc:
        raise ParseError(str(exc), last) from None


def save_off(path, mesh: TriMesh) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"OFF\n{mesh.n_vertices} {len(mesh.faces)} 0\n")
        np.savetxt(fh, mesh.vertices, fmt=GEOM_FMT)
        np.savetxt(fh, np.column_stack([np.full(len(mesh.faces), 3), mesh.faces]), fmt="%d")


def load_ply(path) -> TriMesh | PointCloud:
    """ASCII PLY with ``x y z`` vertices (optional ``nx ny nz``) and optional triangles."""
    with open(path, "r", encoding="ascii", errors="replace") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing ply magic", 1)
    elements, props, cur = [], {}, None
    i = 1
    while True:
        if i >= len(lines):
            raise ParseError("header not terminated by end_header", i)
        tok = lines[i].split()
        i += 1
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise ParseError("only ascii PLY is supported", i)
        elif tok[0] == "element":
            if len(tok) != 3:
                raise ParseError("malformed element line", i)
            cur = tok[1]
            elements.append((cur, int(tok[2])))
            props[cur] = []
        elif tok[0] == "property":
            if cur is None:
                raise ParseError("property before element", i)
            props[cur].append(tok[-1])
        elif tok[0] == "end_header":
            break
        else:
            raise ParseError(f"unknown header keyword {tok[0]!r}", i)
    verts = normals = None
    faces = np.zeros((0, 3), dtype=np.int64)
    for name, count in elements:
        rows = []
        for _ in range(count):
            while i < len(lines) and not lines[i].strip():
                i += 1
            if i >= len(lines):
                raise ParseError(f"file truncated in element {name!r}: got {len(rows)} of {count}", i + 1)
            rows.append((i + 1, lines[i].split()))
            i += 1
        if name == "vertex":
            names = props[name]
            try:
                cols = [names.index(c) for c in ("x", "y", "z")]
            except ValueError:
                raise ParseError("vertex element lacks x/y/z", 2) from None
            data = np.array([_floats(t, no, len(names)) for no, t in rows]).reshape(-1, len(names))
            verts = data[:, cols]
            if all(c in names for c in ("nx", "ny", "nz")):
                normals = data[:, [names.index(c) for c in ("nx", "ny", "nz")]]
        elif name == "face":
            faces = np.array([_face(t, no) for no, t in rows], dtype=np.int64).reshape(-1, 3)
    if verts is None:
        raise ParseError("no vertex element", 1)
    try:
        if len(faces):
            return TriMesh(verts, faces)
        if normals is not None:
            normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
        return PointCloud(verts, normals)
    except ValueError as exc:
        raise ParseError(str(exc), len(lines)) from None


def save_ply(path, geom: TriMesh | PointCloud) -> None:
    pts = geom.vertices if isinstance(geom, TriMesh) else geom.points
    normals = getattr(geom, "normals", None)
    faces = geom.faces if isinstance(geom, TriMesh) else None
    with open(path, "w", encoding="ascii") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(pts)}\nproperty double x\nproperty double y\nproperty double z\n")
        if normals is not None:
            fh.write("property double nx\nproperty double ny\nproperty double nz\n")
        if faces is not None:
            fh.write(f"element face {len(faces)}\nproperty list uchar int vertex_indices\n")
        fh.write("end_header\n")
        np.savetxt(fh, pts if normals is None else np.hstack([pts, normals]), fmt=GEOM_FMT)
        if faces is not None:
            np.savetxt(fh, np.column_stack([np.full(len(faces), 3), faces]), fmt="%d")


def load_mesh(path) -> TriMesh:
    path = Path(path)
    if path.suffix.lower() == ".off":
        return load_off(path)
    g = load_ply(path)
    if not isinstance(g, TriMesh):
        raise ParseError("PLY file has no faces", 1)
    return g


def save_mesh(path, mesh: TriMesh) -> None:
    (save_off if Path(path).suffix.lower() == ".off" else save_ply)(path, mesh)


def load_cloud(path) -> PointCloud:
    """Point cloud from PLY (faces ignored), OFF (vertices) or whitespace/CSV ``x y z`` rows."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".off":
        return PointCloud(load_off(path).vertices)
    if suffix == ".ply":
        g = load_ply(path)
        return PointCloud(g.vertices) if isinstance(g, TriMesh) else g
    rows = []
    for no, tok in _tokens(path):
        tok = [t for part in tok for t in part.split(",") if t]
        if tok[0].lower() == "x":
            continue
        rows.append(_floats(tok, no, 3))
    if not rows:
        raise ParseError("no points", 1)
    return PointCloud(np.array(rows))


def save_cloud(path, cloud: PointCloud) -> None:
    save_ply(path, cloud)


# ---------------------------------------------------------------------------
# CSV


def write_csv(path, header: list[str], columns: list[np.ndarray], fmts: list[str] | None = None) -> None:
    """Columns of equal length; floats as ``%.9g`` unless formats are given."""
    n = len(columns[0]) if columns else 0
    if any(len(c) != n for c in columns):
        raise ValueError("columns differ in length")
    if fmts is None:
        fmts = ["%d" if np.issubdtype(np.asarray(c).dtype, np.integer) or np.asarray(c).dtype == bool
                else FLOAT_FMT for c in columns]
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in zip(*columns):
            fh.write(",".join(f % v for f, v in zip(fmts, row)) + "\n")


def write_matrix_csv(path, M: np.ndarray) -> None:
    np.savetxt(path, np.atleast_2d(M), fmt=FLOAT_FMT, delimiter=",")


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return header, data


# ---------------------------------------------------------------------------
# Checkpoints


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_checkpoint(directory, ckpt: Checkpoint) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    blocks = []
    for name, arr in ckpt.theta.params.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        fname = name + ".f4"
        (d / fname).write_bytes(data)
        blocks.append({"name": name, "shape": list(arr.shape), "file": fname, "sha256": _sha256(data)})
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "architecture": ckpt.theta.arch.to_dict(),
        "init_seed": ckpt.theta.seed,
        "patch": ckpt.patch.to_dict(),
        "s": ckpt.s,
        "co_scale_lrf": ckpt.co_scale_lrf,
        "meta": ckpt.meta,
        "blocks": blocks,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def load_checkpoint(directory) -> Checkpoint:
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no manifest.json in {d}")
    try:
        m = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"manifest: {exc.msg}", exc.lineno) from None
    if m.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(f"unsupported checkpoint format {m.get('format')!r}", 1)
    params = {}
    for b in m["blocks"]:
        data = (d / b["file"]).read_bytes()
        expected = 4 * int(np.prod(b["shape"], dtype=np.int64))
        if len(data) != expected:
            raise ParseError(f"block {b['name']!r} truncated at byte offset {len(data)} "
                             f"(expected {expected} bytes)")
        if _sha256(data) != b["sha256"]:
            raise ParseError(f"block {b['name']!r} checksum mismatch")
        params[b["name"]] = np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(b["shape"])
    theta = ConvNetParams(Architecture.from_dict(m["architecture"]), params, m.get("init_seed"))
    return Checkpoint(theta, PatchParams(**m["patch"]), m["s"], m["co_scale_lrf"], m.get("meta", {}))


# ---------------------------------------------------------------------------
# Voxel grids


def save_voxel_grid(path, grid: VoxelGrid) -> None:
    """Flat little-endian float32 blob plus a ``.json`` header next to it."""
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(grid.values, dtype="<f4").tobytes())
    header = {"resolution": grid.resolution, "s": grid.extent, "sigma": grid.sigma}
    Path(str(path) + ".json").write_text(json.dumps(header, sort_keys=True) + "\n")


def load_voxel_grid(path) -> VoxelGrid:
    path = Path(path)
    h = json.loads(Path(str(path) + ".json").read_text())
    r = int(h["resolution"])
    data = path.read_bytes()
    if len(data) != 4 * r ** 3:
        raise ParseError(f"voxel blob truncated at byte offset {len(data)} (expected {4 * r ** 3})")
    return VoxelGrid(np.frombuffer(data, dtype="<f4").reshape(r, r, r).astype(np.float64), h["s"], h["sigma"])


# ---------------------------------------------------------------------------
# Manifests


def file_digest(path) -> str:
    h = hashlib.sha256()
    p = Path(path)
    files = sorted(x for x in p.rglob("*") if x.is_file()) if p.is_dir() else [p]
    for f in files:
        h.update(os.fsencode(f.relative_to(p) if p.is_dir() else f.name))
        h.update(f.read_bytes())
    return h.hexdigest()


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
