"""Dense field sampling and lookup-table marching cubes."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._mc_tables import CORNERS, EDGES, TRIANGLES
from .errors import FormatError, GridTooLargeError, IngestIOError
from .geometry import Aabb
from .ingest import _ply_header

log = logging.getLogger(__name__)

CELL_BUDGET = 1 << 27

_TRI = np.full((256, 16), -1, dtype=np.int64)
for _c, _t in enumerate(TRIANGLES):
    _TRI[_c, :len(_t)] = _t
_CORN = np.array(CORNERS, dtype=np.int64)
# per local edge: offset of its lower corner and its axis
_EDGE_LO = np.array([np.minimum(_CORN[a], _CORN[b]) for a, b in EDGES], dtype=np.int64)
_EDGE_AXIS = np.array([int(np.argmax(np.abs(_CORN[a] - _CORN[b]))) for a, b in EDGES], dtype=np.int64)


@dataclass
class ScalarGrid:
    origin: np.ndarray
    spacing: float
    values: np.ndarray                  # (nx, ny, nz)
    cell_mask: np.ndarray | None = None  # (nx-1, ny-1, nz-1); False cells yield no geometry

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)

    def points(self) -> np.ndarray:
        return grid_points(self.origin, self.spacing, self.dims)


@dataclass
class Mesh:
    vertices: np.ndarray    # (V, 3)
    triangles: np.ndarray   # (T, 3) int64

    @classmethod
    def empty(cls) -> "Mesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.triangles)

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def area(self) -> float:
        return float(self.triangle_areas().sum())

    def identical(self, other: "Mesh") -> bool:
        return (self.vertices.tobytes() == other.vertices.tobytes()
                and self.triangles.tobytes() == other.triangles.tobytes())


def grid_dims(bounds: Aabb, spacing: float) -> tuple[int, int, int]:
    n = np.ceil(bounds.extent / spacing - 1e-9).astype(np.int64) + 1
    return tuple(int(max(v, 2)) for v in n)


def grid_points(origin, spacing: float, dims) -> np.ndarray:
    axes = [origin[a] + spacing * np.arange(dims[a]) for a in range(3)]
    g = np.meshgrid(*axes, indexing="ij")
    return np.stack([x.reshape(-1) for x in g], axis=1)


def _check_budget(dims, budget: int) -> None:
    cells = int(np.prod([d - 1 for d in dims]))
    if int(np.prod(dims)) > budget:
        raise GridTooLargeError(f"grid {dims} ({cells} cells) exceeds the budget of {budget}")


def sample_function(fn, bounds: Aabb, spacing: float, budget: int = CELL_BUDGET, chunk: int = 1 << 20) -> ScalarGrid:
    """Evaluate ``fn((N, 3)) -> (N,)`` on the lattice covering ``bounds``."""
    if not spacing > 0:
        raise ValueError("spacing must be positive")
    dims = grid_dims(bounds, spacing)
    _check_budget(dims, budget)
    values = np.empty(int(np.prod(dims)))
    nyz = dims[1] * dims[2]
    step = max(1, chunk // nyz)
    for i0 in range(0, dims[0], step):
        i1 = min(dims[0], i0 + step)
        pts = grid_points(bounds.min + np.array([spacing * i0, 0, 0]), spacing, (i1 - i0, dims[1], dims[2]))
        values[i0 * nyz:i1 * nyz] = fn(pts)
    return ScalarGrid(bounds.min.copy(), float(spacing), values.reshape(dims))


def evaluate_grid(model, bounds: Aabb, spacing: float = 0.10, masked: bool = True,
                  budget: int = CELL_BUDGET) -> ScalarGrid:
    """Sample a trained field; with ``masked`` only cells near allocated leaves keep geometry."""
    grid = sample_function(model, bounds, spacing, budget)
    if masked:
        nx, ny, nz = grid.dims
        centers = grid_points(grid.origin + 0.5 * spacing, spacing, (nx - 1, ny - 1, nz - 1))
        grid.cell_mask = model.tree.leaf_occupied(centers, dilate=1).reshape(nx - 1, ny - 1, nz - 1)
    return grid


def marching_cubes(grid: ScalarGrid, iso: float = 0.0) -> Mesh:
    """Extract the ``iso`` level set; vertices are shared along grid edges."""
    v = grid.values
    nx, ny, nz = v.shape
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.uint8)
    for i, (dx, dy, dz) in enumerate(CORNERS):
        case |= (v[dx:nx - 1 + dx, dy:ny - 1 + dy, dz:nz - 1 + dz] < iso).astype(np.uint8) << np.uint8(i)
    active = (case != 0) & (case != 255)
    if grid.cell_mask is not None:
        active &= grid.cell_mask
    cells = np.argwhere(active)
    if len(cells) == 0:
        return Mesh.empty()
    cases = case[active]
    slots = _TRI[cases]                                    # (K, 16) local edges, -1 padded
    has = slots >= 0
    cell_of = np.repeat(np.arange(len(cells)), has.sum(axis=1))
    local = slots[has]
    lo = cells[cell_of] + _EDGE_LO[local]
    axis = _EDGE_AXIS[local]
    npts = nx * ny * nz
    ids = axis * npts + (lo[:, 0] * ny + lo[:, 1]) * nz + lo[:, 2]
    uniq, inv = np.unique(ids, return_inverse=True)
    # table winding faces the low side; flip so normals point up the field
    tris = inv.reshape(-1, 3)[:, [0, 2, 1]].astype(np.int64)

    ax = uniq // npts
    rem = uniq % npts
    p0 = np.stack([rem // (ny * nz), (rem // nz) % ny, rem % nz], axis=1)
    p1 = p0 + np.eye(3, dtype=np.int64)[ax]
    va = v[p0[:, 0], p0[:, 1], p0[:, 2]]
    vb = v[p1[:, 0], p1[:, 1], p1[:, 2]]
    t = (iso - va) / (vb - va)
    verts = p0.astype(np.float64)
    verts[np.arange(len(verts)), ax] += t
    verts = grid.origin + grid.spacing * verts

    ok = (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])
    return Mesh(verts, tris[ok])


# ---------------------------------------------------------------------------
# mesh files


def write_obj(path, mesh: Mesh, comment: str | None = None) -> None:
    with open(path, "w") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        for x, y, z in mesh.vertices.tolist():
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for t in mesh.triangles + 1:
            fh.write(f"f {t[0]} {t[1]} {t[2]}\n")


def write_ply(path, mesh: Mesh, comment: str | None = None) -> None:
    head = ["ply", "format binary_little_endian 1.0"]
    if comment:
        head.append(f"comment {comment}")
    head += [f"element vertex {len(mesh.vertices)}", "property double x", "property double y", "property double z",
             f"element face {len(mesh.triangles)}", "property list uchar int vertex_indices", "end_header"]
    faces = np.empty(len(mesh.triangles), dtype=[("n", "u1"), ("i", "<i4", (3,))])
    faces["n"] = 3
    faces["i"] = mesh.triangles
    with open(path, "wb") as fh:
        fh.write(("\n".join(head) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
        fh.write(faces.tobytes())


def write_mesh(path, mesh: Mesh, comment: str | None = None) -> None:
    ext = Path(path).suffix.lower()
    if ext == ".obj":
        write_obj(path, mesh, comment)
    elif ext == ".ply":
        write_ply(path, mesh, comment)
    else:
        raise FormatError(f"unsupported mesh extension {ext!r} (use .obj or .ply)")


def _read_obj(text: str) -> Mesh:
    verts, faces = [], []
    for i, line in enumerate(text.splitlines()):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "v":
            verts.append([float(x) for x in tok[1:4]])
        elif tok[0] == "f":
            idx = [int(x.split("/")[0]) for x in tok[1:]]
            idx = [j - 1 if j > 0 else len(verts) + j for j in idx]
            faces += [[idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1)]
    return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def _read_ply(data: bytes) -> Mesh:
    fmt, elements, start = _ply_header(data)
    verts = faces = None
    if fmt == "ascii":
        lines = data[start:].decode("ascii").splitlines()
        pos = 0
        for name, count, props in elements:
            rows = lines[pos:pos + count]
            pos += count
            if name == "vertex":
                names = [p[0] for p in props]
                cols = [names.index(c) for c in "xyz"]
                verts = np.array([[float(r.split()[c]) for c in cols] for r in rows]).reshape(-1, 3)
            elif name == "face":
                out = []
                for r in rows:
                    tok = [int(x) for x in r.split()]
                    idx = tok[1:1 + tok[0]]
                    out += [[idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1)]
                faces = np.array(out, dtype=np.int64).reshape(-1, 3)
    elif fmt == "binary_little_endian":
        pos = start
        for name, count, props in elements:
            if name == "vertex":
                dt = np.dtype([(n, "<" + t) for n, t in props])
                rec = np.frombuffer(data, dtype=dt, count=count, offset=pos)
                verts = np.stack([rec[c].astype(np.float64) for c in "xyz"], axis=1)
                pos += dt.itemsize * count
            elif name == "face":
                dt = np.dtype([("n", "u1"), ("i", "<i4", (3,))])
                rec = np.frombuffer(data, dtype=dt, count=count, offset=pos)
                if count and np.any(rec["n"] != 3):
                    raise FormatError("only triangle faces are supported in binary PLY")
                faces = rec["i"].astype(np.int64)
                pos += dt.itemsize * count
            else:
                raise FormatError(f"unsupported PLY element {name!r}")
    else:
        raise FormatError(f"unsupported PLY format {fmt!r}")
    if verts is None:
        raise FormatError("PLY has no vertex element")
    return Mesh(verts, np.zeros((0, 3), dtype=np.int64) if faces is None else faces)


def read_mesh(path) -> Mesh:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise IngestIOError(f"cannot read mesh {path}: {e}") from e
    if str(path).lower().endswith(".obj"):
        mesh = _read_obj(data.decode("utf-8"))
    else:
        mesh = _read_ply(data)
    if len(mesh.triangles) and (mesh.triangles.min() < 0 or mesh.triangles.max() >= len(mesh.vertices)):
        raise FormatError("face index out of range")
    return mesh
