"""Surface and grid file I/O.

Formats:

* PLY, ascii and binary little-endian.  Positions and normals are written as
  ``double`` so that save -> load round-trips are bit exact; labels ride along
  as ``uchar label`` (0 = artery, 1 = aneurysm) and ``float prob``.
* OBJ, read only (``v``/``f`` lines; ``vn`` entries are ignored because they
  are indexed per corner, not per vertex -- normals are re-estimated).
* Voxel grids as a small text header followed by one byte per voxel in
  x-fastest order.
* Fragment dumps: one text file per fragment, seed ID on the first line and
  one member global ID per following line.
"""

from __future__ import annotations

import os
import tempfile

import numpy as np

from .surface import LabelMap, SurfaceModel, VoxelGrid


class MeshParseError(ValueError):
    """Malformed or unsupported surface file."""


class NonFiniteCoordinateError(MeshParseError):
    """File parsed but contains NaN or infinite coordinates."""


class EmptyModelError(MeshParseError):
    """File parsed but holds no vertices."""


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


def _atomic_write(path, payload: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

def _parse_ply_header(blob: bytes):
    end = blob.find(b"end_header")
    if not blob.startswith(b"ply") or end < 0:
        raise MeshParseError("not a PLY file (missing magic or end_header)")
    end = blob.find(b"\n", end) + 1
    header = blob[:end].decode("ascii", errors="replace")
    body = blob[end:]

    fmt = None
    elements = []  # (name, count, [(prop_name, dtype_str or ('list', count_t, item_t))])
    for line in header.splitlines():
        tokens = line.strip().split()
        if not tokens or tokens[0] in ("ply", "comment", "obj_info", "end_header"):
            continue
        if tokens[0] == "format":
            if tokens[1] == "ascii":
                fmt = "ascii"
            elif tokens[1] == "binary_little_endian":
                fmt = "binary"
            else:
                raise MeshParseError(f"unsupported PLY format {tokens[1]!r}")
        elif tokens[0] == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise MeshParseError("property before any element")
            if tokens[1] == "list":
                if tokens[2] not in _PLY_TYPES or tokens[3] not in _PLY_TYPES:
                    raise MeshParseError(f"unknown PLY list types in {line!r}")
                elements[-1][2].append((tokens[4], ("list", _PLY_TYPES[tokens[2]], _PLY_TYPES[tokens[3]])))
            else:
                if tokens[1] not in _PLY_TYPES:
                    raise MeshParseError(f"unknown PLY type {tokens[1]!r}")
                elements[-1][2].append((tokens[2], _PLY_TYPES[tokens[1]]))
        else:
            raise MeshParseError(f"unexpected header line {line!r}")
    if fmt is None:
        raise MeshParseError("PLY header has no format line")
    return fmt, elements, body


def _read_ply_ascii_element(lines, offset, count, props):
    scalars = {name: [] for name, spec in props if not isinstance(spec, tuple)}
    lists = {name: [] for name, spec in props if isinstance(spec, tuple)}
    for row in range(count):
        if offset + row >= len(lines):
            raise MeshParseError("unexpected end of ascii PLY data")
        tokens = lines[offset + row].split()
        pos = 0
        for name, spec in props:
            if isinstance(spec, tuple):
                n = int(tokens[pos]); pos += 1
                lists[name].append([float(t) for t in tokens[pos:pos + n]])
                pos += n
            else:
                scalars[name].append(float(tokens[pos])); pos += 1
        if pos != len(tokens):
            raise MeshParseError(f"trailing tokens on PLY data row {row}")
    out = {name: np.asarray(vals) for name, vals in scalars.items()}
    out.update(lists)
    return out, offset + count


def _read_ply_binary_element(body, offset, count, props):
    if all(not isinstance(spec, tuple) for _, spec in props):
        dtype = np.dtype([(name, "<" + spec) for name, spec in props])
        nbytes = dtype.itemsize * count
        if offset + nbytes > len(body):
            raise MeshParseError("unexpected end of binary PLY data")
        rec = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
        return {name: rec[name] for name, _ in props}, offset + nbytes

    if len(props) == 1 and isinstance(props[0][1], tuple):
        name, (_, count_t, item_t) = props[0]
        count_dt = np.dtype("<" + count_t)
        item_dt = np.dtype("<" + item_t)
        if count > 0:
            first = int(np.frombuffer(body, dtype=count_dt, count=1, offset=offset)[0])
            stride = count_dt.itemsize + first * item_dt.itemsize
            if offset + stride * count <= len(body):
                rec = np.frombuffer(
                    body, count=count, offset=offset,
                    dtype=np.dtype([("n", count_dt), ("v", item_dt, (first,))]),
                )
                if (rec["n"] == first).all():
                    return {name: [row.tolist() for row in rec["v"]]}, offset + stride * count
        # mixed polygon sizes: walk item by item
        vals = []
        for _ in range(count):
            n = int(np.frombuffer(body, dtype=count_dt, count=1, offset=offset)[0])
            offset += count_dt.itemsize
            vals.append(np.frombuffer(body, dtype=item_dt, count=n, offset=offset).tolist())
            offset += n * item_dt.itemsize
        return {name: vals}, offset
    raise MeshParseError("unsupported mix of list and scalar properties in one element")


def _triangulate(polygons) -> np.ndarray | None:
    tris = []
    for poly in polygons:
        idx = [int(v) for v in poly]
        if len(idx) < 3:
            raise MeshParseError(f"face with fewer than 3 vertices: {idx}")
        for i in range(1, len(idx) - 1):
            tris.append((idx[0], idx[i], idx[i + 1]))
    if not tris:
        return None
    return np.asarray(tris, dtype=np.int64)


def read_ply(path):
    """Read a PLY file into raw arrays.

    Returns (positions, normals_or_None, triangles_or_None, labels_or_None,
    prob_or_None).  Unknown vertex properties are skipped.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    fmt, elements, body = _parse_ply_header(blob)

    data = {}
    if fmt == "ascii":
        lines = [ln for ln in body.decode("ascii", errors="replace").splitlines() if ln.strip()]
        offset = 0
        for name, count, props in elements:
            data[name], offset = _read_ply_ascii_element(lines, offset, count, props)
    else:
        offset = 0
        for name, count, props in elements:
            data[name], offset = _read_ply_binary_element(body, offset, count, props)

    if "vertex" not in data:
        raise MeshParseError("PLY file has no vertex element")
    vert = data["vertex"]
    for axis in ("x", "y", "z"):
        if axis not in vert:
            raise MeshParseError(f"vertex element lacks property {axis!r}")
    positions = np.column_stack([np.asarray(vert[a], dtype=np.float64) for a in ("x", "y", "z")])
    normals = None
    if all(k in vert for k in ("nx", "ny", "nz")):
        normals = np.column_stack([np.asarray(vert[a], dtype=np.float64) for a in ("nx", "ny", "nz")])
    labels = np.asarray(vert["label"], dtype=np.uint8) if "label" in vert else None
    prob = np.asarray(vert["prob"], dtype=np.float64) if "prob" in vert else None

    triangles = None
    if "face" in data:
        face = data["face"]
        key = "vertex_indices" if "vertex_indices" in face else "vertex_index" if "vertex_index" in face else None
        if key is None:
            raise MeshParseError("face element lacks vertex index list")
        triangles = _triangulate(face[key])
    return positions, normals, triangles, labels, prob


def _ply_payload(positions, normals, triangles, labels=None, prob=None, binary=True) -> bytes:
    n = positions.shape[0]
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0"]
    header.append(f"element vertex {n}")
    for a in ("x", "y", "z"):
        header.append(f"property double {a}")
    for a in ("nx", "ny", "nz"):
        header.append(f"property double {a}")
    if labels is not None:
        header.append("property uchar label")
        header.append("property float prob")
    m = 0 if triangles is None else triangles.shape[0]
    header.append(f"element face {m}")
    header.append("property list uchar int vertex_indices")
    header.append("end_header")
    head = ("\n".join(header) + "\n").encode("ascii")

    if binary:
        fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8"), ("nx", "<f8"), ("ny", "<f8"), ("nz", "<f8")]
        if labels is not None:
            fields += [("label", "u1"), ("prob", "<f4")]
        rec = np.empty(n, dtype=np.dtype(fields))
        rec["x"], rec["y"], rec["z"] = positions.T
        rec["nx"], rec["ny"], rec["nz"] = normals.T
        if labels is not None:
            rec["label"] = labels
            rec["prob"] = prob.astype(np.float32)
        chunks = [head, rec.tobytes()]
        if m:
            frec = np.empty(m, dtype=np.dtype([("n", "u1"), ("v", "<i4", (3,))]))
            frec["n"] = 3
            frec["v"] = triangles.astype(np.int32)
            chunks.append(frec.tobytes())
        return b"".join(chunks)

    rows = []
    for i in range(n):
        parts = ["%.17g" % v for v in positions[i]] + ["%.17g" % v for v in normals[i]]
        if labels is not None:
            parts.append(str(int(labels[i])))
            parts.append("%.9g" % np.float32(prob[i]))
        rows.append(" ".join(parts))
    if m:
        rows.extend("3 %d %d %d" % tuple(t) for t in triangles)
    return head + ("\n".join(rows) + "\n").encode("ascii")


def save_surface(model: SurfaceModel, path, binary: bool = True) -> None:
    _atomic_write(path, _ply_payload(model.positions, model.normals, model.triangles, binary=binary))


def save_labeled_surface(model: SurfaceModel, labelmap: LabelMap, path, binary: bool = True) -> None:
    """Write the model with per-vertex ``uchar label`` and ``float prob``."""
    if len(labelmap) != model.n_points:
        raise ValueError(f"label map length {len(labelmap)} does not match model size {model.n_points}")
    _atomic_write(path, _ply_payload(
        model.positions, model.normals, model.triangles,
        labels=labelmap.labels, prob=labelmap.prob, binary=binary,
    ))


# ---------------------------------------------------------------------------
# OBJ
# ---------------------------------------------------------------------------

def read_obj(path):
    positions = []
    faces = []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens or tokens[0].startswith("#"):
                continue
            if tokens[0] == "v":
                if len(tokens) < 4:
                    raise MeshParseError(f"line {lineno}: vertex needs 3 coordinates")
                try:
                    positions.append([float(t) for t in tokens[1:4]])
                except ValueError as exc:
                    raise MeshParseError(f"line {lineno}: bad vertex coordinate") from exc
            elif tokens[0] == "f":
                idx = []
                for tok in tokens[1:]:
                    try:
                        v = int(tok.split("/")[0])
                    except ValueError as exc:
                        raise MeshParseError(f"line {lineno}: bad face index {tok!r}") from exc
                    idx.append(v - 1 if v > 0 else len(positions) + v)
                faces.append(idx)
            # vn / vt / o / g / s / usemtl etc. are ignored
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    return pos, _triangulate(faces) if faces else None


# ---------------------------------------------------------------------------
# Loading into validated models
# ---------------------------------------------------------------------------

def _detect_format(path, fmt: str | None) -> str:
    if fmt is not None:
        fmt = fmt.lower()
        if fmt not in ("ply", "obj"):
            raise MeshParseError(f"unknown format {fmt!r}")
        return fmt
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".ply":
        return "ply"
    if ext == ".obj":
        return "obj"
    raise MeshParseError(f"cannot infer format from {path!r}; pass format='ply' or 'obj'")


def load_surface(path, fmt: str | None = None, knn_k: int = 10) -> SurfaceModel:
    """Load a surface model, estimating normals when the file has none.

    Normals come area-weighted from triangles when connectivity exists,
    otherwise from PCA planes over ``knn_k`` neighbors with orientation
    propagated along a spanning tree.
    """
    from . import normals as _normals

    kind = _detect_format(path, fmt)
    if kind == "ply":
        positions, nrm, triangles, _, _ = read_ply(path)
    else:
        positions, triangles = read_obj(path)
        nrm = None

    if positions.shape[0] == 0:
        raise EmptyModelError(f"{path}: no vertices")
    if not np.isfinite(positions).all():
        raise NonFiniteCoordinateError(f"{path}: non-finite vertex coordinate")

    if nrm is not None:
        lens = np.linalg.norm(nrm, axis=1)
        if not np.isfinite(nrm).all() or (lens < 1e-12).any():
            raise MeshParseError(f"{path}: degenerate normal in file")
        nrm = nrm / lens[:, None]
    elif triangles is not None:
        nrm = _normals.triangle_vertex_normals(positions, triangles)
    else:
        nrm = _normals.pca_normals(positions, k=knn_k)
    return SurfaceModel(positions=positions, normals=nrm, triangles=triangles)


def load_labeled_surface(path) -> tuple[SurfaceModel, LabelMap]:
    """Load a PLY written by :func:`save_labeled_surface`.

    Pass coverage is not stored in the file, so it is reconstructed as one
    pass everywhere.
    """
    positions, nrm, triangles, labels, prob = read_ply(path)
    if positions.shape[0] == 0:
        raise EmptyModelError(f"{path}: no vertices")
    if not np.isfinite(positions).all():
        raise NonFiniteCoordinateError(f"{path}: non-finite vertex coordinate")
    if labels is None:
        raise MeshParseError(f"{path}: no 'label' vertex property")
    if nrm is None:
        from . import normals as _normals
        nrm = (_normals.triangle_vertex_normals(positions, triangles) if triangles is not None
               else _normals.pca_normals(positions))
    else:
        nrm = nrm / np.linalg.norm(nrm, axis=1)[:, None]
    model = SurfaceModel(positions=positions, normals=nrm, triangles=triangles)
    if prob is None:
        prob = labels.astype(np.float64)
    labelmap = LabelMap(labels=labels, prob=np.clip(prob, 0.0, 1.0),
                        coverage=np.ones(len(labels), np.int64))
    return model, labelmap


# ---------------------------------------------------------------------------
# Voxel grids
# ---------------------------------------------------------------------------

_GRID_MAGIC = "aneuseg-voxels 1"


def save_voxel_grid(grid: VoxelGrid, path) -> None:
    nx, ny, nz = grid.dims
    header = (
        f"{_GRID_MAGIC}\n"
        f"dims {nx} {ny} {nz}\n"
        f"origin {'%.17g' % grid.origin[0]} {'%.17g' % grid.origin[1]} {'%.17g' % grid.origin[2]}\n"
        f"spacing {'%.17g' % grid.spacing}\n"
        "data\n"
    ).encode("ascii")
    # x-fastest: k outer, j, i inner
    payload = grid.occupancy.astype(np.uint8).transpose(2, 1, 0).tobytes()
    _atomic_write(path, header + payload)


def load_voxel_grid(path) -> VoxelGrid:
    with open(path, "rb") as fh:
        blob = fh.read()
    marker = blob.find(b"data\n")
    if not blob.startswith(_GRID_MAGIC.encode("ascii")) or marker < 0:
        raise MeshParseError(f"{path}: not a voxel grid file")
    fields = {}
    for line in blob[:marker].decode("ascii").splitlines()[1:]:
        tokens = line.split()
        if tokens:
            fields[tokens[0]] = tokens[1:]
    try:
        dims = tuple(int(v) for v in fields["dims"])
        origin = np.array([float(v) for v in fields["origin"]])
        spacing = float(fields["spacing"][0])
    except (KeyError, ValueError, IndexError) as exc:
        raise MeshParseError(f"{path}: malformed voxel grid header") from exc
    body = blob[marker + 5:]
    n = dims[0] * dims[1] * dims[2]
    if len(body) != n:
        raise MeshParseError(f"{path}: expected {n} voxel bytes, found {len(body)}")
    occ = np.frombuffer(body, dtype=np.uint8).reshape(dims[2], dims[1], dims[0]).transpose(2, 1, 0)
    return VoxelGrid(origin=origin, spacing=spacing, occupancy=occ.astype(bool))


# ---------------------------------------------------------------------------
# Fragment dumps
# ---------------------------------------------------------------------------

def dump_fragments(fragments, directory) -> list:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for i, frag in enumerate(fragments):
        path = os.path.join(directory, f"fragment_{i:05d}.txt")
        lines = [str(frag.seed)] + [str(int(m)) for m in frag.member_ids]
        _atomic_write(path, ("\n".join(lines) + "\n").encode("ascii"))
        paths.append(path)
    return paths


def load_fragment_ids(path) -> tuple[int, np.ndarray]:
    with open(path, "r", encoding="ascii") as fh:
        values = [int(line) for line in fh if line.strip()]
    if not values:
        raise MeshParseError(f"{path}: empty fragment dump")
    return values[0], np.asarray(values[1:], dtype=np.int64)


__all__ = [
    "MeshParseError", "NonFiniteCoordinateError", "EmptyModelError",
    "read_ply", "read_obj", "load_surface", "load_labeled_surface",
    "save_surface", "save_labeled_surface",
    "save_voxel_grid", "load_voxel_grid",
    "dump_fragments", "load_fragment_ids",
]
