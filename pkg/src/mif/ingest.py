"""Scan/pose readers and the range, voxel and outlier preprocessing filters."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, EmptyInputError, FormatError, IngestIOError, NonRigidError
from .geometry import Aabb, Pose, as_points, nearest_rotation, transform_point

log = logging.getLogger(__name__)

SCAN_FORMATS = ("xyz-text", "ply-ascii", "ply-binary-little-endian", "kitti-bin")
POSE_FORMATS = ("kitti-3x4-rows", "matrix-4x4-blocks")
RIGID_TOL = 1e-3


@dataclass(frozen=True, eq=False)
class Scan:
    """One posed scan; ``points`` are in the sensor frame."""

    points: np.ndarray
    pose: Pose

    @property
    def sensor_origin(self) -> np.ndarray:
        return self.pose.translation

    @property
    def world_points(self) -> np.ndarray:
        return transform_point(self.pose, self.points)


@dataclass(frozen=True, eq=False)
class ScanSet:
    scans: tuple[Scan, ...]
    world_bounds: Aabb

    @classmethod
    def from_scans(cls, scans: Sequence[Scan]) -> "ScanSet":
        if not scans:
            raise EmptyInputError("empty scan set")
        bounds = Aabb.of_points(scans[0].world_points)
        for s in scans[1:]:
            bounds = bounds.union(Aabb.of_points(s.world_points))
        return cls(tuple(scans), bounds)

    @property
    def num_points(self) -> int:
        return sum(len(s.points) for s in self.scans)

    def save(self, path, meta: dict | None = None) -> None:
        arrays = {"bounds": np.stack([self.world_bounds.min, self.world_bounds.max])}
        if meta:
            arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
        for i, s in enumerate(self.scans):
            arrays[f"points_{i:06d}"] = s.points
            arrays[f"pose_{i:06d}"] = s.pose.matrix()
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "ScanSet":
        with np.load(path, allow_pickle=False) as z:
            n = sum(1 for k in z.files if k.startswith("points_"))
            scans = [Scan(z[f"points_{i:06d}"], Pose.from_matrix(z[f"pose_{i:06d}"])) for i in range(n)]
            b = z["bounds"]
        return cls(tuple(scans), Aabb(b[0], b[1]))


# ---------------------------------------------------------------------------
# readers


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise IngestIOError(f"cannot read {path}: {e}") from e


def _parse_rows(text: str, width: int, what: str) -> list[np.ndarray]:
    rows = []
    for i, line in enumerate(text.splitlines()):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            vals = [float(v) for v in line.replace(",", " ").split()]
        except ValueError:
            raise FormatError(f"non-numeric {what}", record=len(rows)) from None
        if len(vals) < width:
            raise FormatError(f"{what} has {len(vals)} values, expected {width}", record=len(rows))
        rows.append(np.array(vals[:width]))
    return rows


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _ply_header(data: bytes):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise FormatError("not a PLY file")
    nl = data.find(b"\n", end)
    body_start = len(data) if nl < 0 else nl + 1
    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    for line in data[:end].decode("ascii", "replace").splitlines()[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise FormatError("property before element")
            if tok[1] == "list":
                elements[-1][2].append((tok[-1], "list"))
            else:
                if tok[1] not in _PLY_TYPES:
                    raise FormatError(f"unknown PLY type {tok[1]}")
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
    return fmt, elements, body_start


def _ply_vertices(data: bytes, expect: str) -> np.ndarray:
    fmt, elements, start = _ply_header(data)
    if fmt != expect:
        raise FormatError(f"PLY format is {fmt!r}, expected {expect!r}")
    if not elements or elements[0][0] != "vertex":
        raise FormatError("PLY vertex element must come first")
    _, count, props = elements[0]
    names = [p[0] for p in props]
    if not {"x", "y", "z"} <= set(names) or any(t == "list" for _, t in props):
        raise FormatError("PLY vertex element needs scalar x, y, z properties")
    if count == 0:
        raise FormatError("empty cloud")
    cols = [names.index(c) for c in "xyz"]
    if fmt == "ascii":
        lines = data[start:].decode("ascii", "replace").splitlines()
        if len(lines) < count:
            raise FormatError("truncated PLY body", record=len(lines))
        out = np.empty((count, 3))
        for i in range(count):
            tok = lines[i].split()
            if len(tok) < len(props):
                raise FormatError("short vertex record", record=i)
            try:
                out[i] = [float(tok[c]) for c in cols]
            except ValueError:
                raise FormatError("non-numeric vertex record", record=i) from None
        return out
    dtype = np.dtype([(n, "<" + t) for n, t in props])
    need = dtype.itemsize * count
    if len(data) - start < need:
        raise FormatError("truncated PLY body", record=(len(data) - start) // dtype.itemsize)
    rec = np.frombuffer(data, dtype=dtype, count=count, offset=start)
    return np.stack([rec[c].astype(np.float64) for c in "xyz"], axis=1)


def load_scan(path, format: str) -> np.ndarray:
    """Read a point cloud as an ``(N, 3)`` float64 array."""
    if format not in SCAN_FORMATS:
        raise ConfigError(f"unknown scan format {format!r}")
    data = _read_bytes(path)
    if format == "kitti-bin":
        if len(data) % 16:
            raise FormatError("kitti-bin size is not a multiple of 16 bytes", record=len(data) // 16)
        pts = np.frombuffer(data, dtype="<f4").reshape(-1, 4)[:, :3].astype(np.float64)
    elif format == "xyz-text":
        rows = _parse_rows(data.decode("utf-8", "replace"), 3, "xyz record")
        pts = np.array(rows).reshape(-1, 3)
    elif format == "ply-ascii":
        pts = _ply_vertices(data, "ascii")
    else:
        pts = _ply_vertices(data, "binary_little_endian")
    if len(pts) == 0:
        raise FormatError("empty cloud")
    bad = np.flatnonzero(~np.all(np.isfinite(pts), axis=1))
    if len(bad):
        raise FormatError("non-finite point", record=int(bad[0]))
    return pts


def write_kitti_bin(path, points, intensity: float = 0.0) -> None:
    pts = as_points(points)
    buf = np.empty((len(pts), 4), dtype="<f4")
    buf[:, :3] = pts
    buf[:, 3] = intensity
    Path(path).write_bytes(buf.tobytes())


def write_xyz(path, points) -> None:
    np.savetxt(path, as_points(points), fmt="%.17g")


def _rigid(m: np.ndarray, record: int) -> Pose:
    r = m[:3, :3]
    dev = np.abs(r @ r.T - np.eye(3)).max()
    if dev >= RIGID_TOL or np.linalg.det(r) <= 0:
        raise NonRigidError(f"pose {record} is not a rigid transform (deviation {dev:.3g})")
    return Pose(nearest_rotation(r), m[:3, 3])


def load_poses(path, format: str) -> list[Pose]:
    if format not in POSE_FORMATS:
        raise ConfigError(f"unknown pose format {format!r}")
    text = _read_bytes(path).decode("utf-8", "replace")
    if format == "kitti-3x4-rows":
        rows = _parse_rows(text, 12, "pose row")
        mats = [r.reshape(3, 4) for r in rows]
    else:
        rows = _parse_rows(text, 4, "matrix row")
        if len(rows) % 4:
            raise FormatError("incomplete 4x4 block", record=len(rows) // 4)
        mats = [np.stack(rows[i:i + 4]) for i in range(0, len(rows), 4)]
        for i, m in enumerate(mats):
            if not np.allclose(m[3], [0, 0, 0, 1]):
                raise FormatError("last row of a 4x4 pose must be 0 0 0 1", record=i)
    return [_rigid(m, i) for i, m in enumerate(mats)]


def write_poses(path, poses: Sequence[Pose]) -> None:
    with open(path, "w") as fh:
        for p in poses:
            fh.write(" ".join(repr(float(v)) for v in p.matrix()[:3].ravel()) + "\n")


# ---------------------------------------------------------------------------
# filters


def range_filter(points, min_r: float, max_r: float) -> np.ndarray:
    if not 0 <= min_r < max_r:
        raise ConfigError(f"invalid range [{min_r}, {max_r}]")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    r = np.linalg.norm(pts, axis=1)
    return pts[(r >= min_r) & (r <= max_r)]


def voxel_downsample(points, voxel: float) -> np.ndarray:
    """Replace the points of every occupied voxel by their centroid.

    Output is ordered by voxel key, which makes the filter deterministic and
    idempotent.
    """
    if not voxel > 0:
        raise ConfigError(f"voxel size must be positive, got {voxel}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return pts.copy()
    keys = np.floor(pts / voxel).astype(np.int64)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    sums = np.zeros((len(counts), 3))
    for a in range(3):
        sums[:, a] = np.bincount(inv, weights=pts[:, a], minlength=len(counts))
    return sums / counts[:, None]


def mean_knn_distances(points, k: int) -> np.ndarray:
    pts = as_points(points)
    d, _ = cKDTree(pts).query(pts, k=k + 1)
    return d[:, 1:].mean(axis=1)


def remove_statistical_outliers(points, k: int, max_std: float) -> np.ndarray:
    """Drop points whose mean k-NN distance exceeds ``mean + max_std * std``."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) <= k:
        return pts
    md = mean_knn_distances(pts, k)
    mu, sigma = md.mean(), md.std()
    # slack absorbs summation round-off on perfectly regular inputs
    thresh = mu + max_std * sigma + 1e-9 * max(mu, 1.0)
    return pts[md <= thresh]


@dataclass(frozen=True)
class PreprocessConfig:
    min_range: float = 1.5
    max_range: float = 50.0
    voxel: float = 0.05
    knn: int = 25
    std_mult: float = 2.5


def _preprocess_one(args) -> np.ndarray:
    i, pts, cfg = args
    pts = range_filter(pts, cfg.min_range, cfg.max_range)
    pts = voxel_downsample(pts, cfg.voxel)
    pts = remove_statistical_outliers(pts, cfg.knn, cfg.std_mult)
    if len(pts) == 0:
        raise EmptyInputError(f"scan {i} is empty after filtering")
    return pts


def preprocess_scanset(
    scans: Sequence[np.ndarray],
    poses: Sequence[Pose],
    cfg: PreprocessConfig = PreprocessConfig(),
    threads: int = 1,
) -> ScanSet:
    if len(scans) != len(poses):
        raise ConfigError(f"count mismatch: {len(scans)} scans, {len(poses)} poses")
    if not scans:
        raise EmptyInputError("no scans given")
    jobs = [(i, s, cfg) for i, s in enumerate(scans)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            filtered = list(ex.map(_preprocess_one, jobs))
    else:
        filtered = [_preprocess_one(j) for j in jobs]
    log.info("preprocessed %d scans: %d -> %d points", len(scans),
             sum(len(s) for s in scans), sum(len(f) for f in filtered))
    return ScanSet.from_scans([Scan(f, p) for f, p in zip(filtered, poses)])


def load_scan_dir(scan_dir, poses_path, scan_format: str = "kitti-bin",
                  pose_format: str = "kitti-3x4-rows") -> tuple[list[np.ndarray], list[Pose]]:
    """Read every scan file in ``scan_dir`` (sorted by name) plus a pose file."""
    ext = {"kitti-bin": ".bin", "xyz-text": ".xyz"}.get(scan_format, ".ply")
    files = sorted(f for f in os.listdir(scan_dir) if f.endswith(ext))
    if not files:
        raise IngestIOError(f"no {ext} files in {scan_dir}")
    return [load_scan(Path(scan_dir) / f, scan_format) for f in files], load_poses(poses_path, pose_format)
