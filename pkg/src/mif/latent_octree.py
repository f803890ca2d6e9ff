"""Sparse hierarchical latent grid addressed by Morton codes.

Features live on the corner lattice of each level so that adjacent voxels
share them and trilinear interpolation is continuous.  Level ``l`` has voxel
size ``leaf_voxel * 2**l``; a query interpolates the 8 corners of its voxel
on every level and sums the per-level codes.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyInputError, FormatError
from .geometry import as_points

OCT_MAGIC = b"MIFOCT1\x00"
AXIS_BITS = 21
AXIS_LIMIT = 1 << AXIS_BITS
MISSING = -1

# corner c = bx + 2*by + 4*bz
CORNER_OFFSETS = np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64)

_U = np.uint64


def _split3(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64) & _U(0x1FFFFF)
    x = (x | (x << _U(32))) & _U(0x1F00000000FFFF)
    x = (x | (x << _U(16))) & _U(0x1F0000FF0000FF)
    x = (x | (x << _U(8))) & _U(0x100F00F00F00F00F)
    x = (x | (x << _U(4))) & _U(0x10C30C30C30C30C3)
    x = (x | (x << _U(2))) & _U(0x1249249249249249)
    return x


def _compact3(x: np.ndarray) -> np.ndarray:
    x = x & _U(0x1249249249249249)
    x = (x ^ (x >> _U(2))) & _U(0x10C30C30C30C30C3)
    x = (x ^ (x >> _U(4))) & _U(0x100F00F00F00F00F)
    x = (x ^ (x >> _U(8))) & _U(0x1F0000FF0000FF)
    x = (x ^ (x >> _U(16))) & _U(0x1F00000000FFFF)
    x = (x ^ (x >> _U(32))) & _U(0x1FFFFF)
    return x


def morton_encode(i, j, k):
    """Interleave three 21-bit indices (x bits at 0, 3, 6, ...).

    Accepts scalars or equally shaped integer arrays.
    """
    arrs = [np.asarray(v) for v in (i, j, k)]
    for a in arrs:
        if np.any(a < 0) or np.any(a >= AXIS_LIMIT):
            raise OverflowError(f"grid index outside [0, 2^{AXIS_BITS})")
    code = _split3(arrs[0]) | (_split3(arrs[1]) << _U(1)) | (_split3(arrs[2]) << _U(2))
    return int(code) if code.ndim == 0 else code


def morton_decode(code):
    c = np.asarray(code, dtype=np.uint64)
    out = tuple(_compact3(c >> _U(s)).astype(np.int64) for s in range(3))
    if c.ndim == 0:
        return tuple(int(v) for v in out)
    return out


def _encode_rows(ijk: np.ndarray) -> np.ndarray:
    return _split3(ijk[..., 0]) | (_split3(ijk[..., 1]) << _U(1)) | (_split3(ijk[..., 2]) << _U(2))


@dataclass
class LevelTable:
    """Exact code -> row map for one level (sorted keys, binary search)."""

    keys: np.ndarray        # (n,) uint64, strictly increasing
    features: np.ndarray    # (n, d) float64

    def lookup(self, codes: np.ndarray) -> np.ndarray:
        pos = np.searchsorted(self.keys, codes)
        pos_c = np.minimum(pos, len(self.keys) - 1)
        hit = (pos < len(self.keys)) & (self.keys[pos_c] == codes)
        return np.where(hit, pos_c, MISSING)


@dataclass
class LevelRecord:
    index: np.ndarray     # (N, 8) feature rows, MISSING for absent corners
    weights: np.ndarray   # (N, 8) trilinear weights
    frac: np.ndarray      # (N, 3) position inside the voxel, in [0, 1]
    voxel: float


@dataclass
class InterpRecord:
    levels: list[LevelRecord]

    def __len__(self) -> int:
        return len(self.levels[0].index)


def trilinear_weights(frac: np.ndarray) -> np.ndarray:
    f = frac[:, None, :]
    b = CORNER_OFFSETS[None, :, :]
    return np.prod(np.where(b == 1, f, 1.0 - f), axis=2)


def trilinear_weight_gradients(frac: np.ndarray) -> np.ndarray:
    """d w_c / d frac_a, shape (N, 8, 3)."""
    f = frac[:, None, :]
    b = CORNER_OFFSETS[None, :, :]
    fac = np.where(b == 1, f, 1.0 - f)
    sgn = np.where(b == 1, 1.0, -1.0)
    out = np.empty((len(frac), 8, 3))
    for a in range(3):
        others = [x for x in range(3) if x != a]
        out[:, :, a] = sgn[:, :, a] * fac[:, :, others[0]] * fac[:, :, others[1]]
    return out


@dataclass
class LatentOctree:
    origin: np.ndarray
    leaf_voxel: float
    num_levels: int
    dim: int
    levels: list[LevelTable]
    leaf_voxels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint64))
    lookups: int = 0

    def voxel_size(self, level: int) -> float:
        return self.leaf_voxel * (1 << level)

    @property
    def num_features(self) -> int:
        return sum(len(l.keys) for l in self.levels)

    @property
    def features(self) -> list[np.ndarray]:
        return [l.features for l in self.levels]

    def grid_coords(self, pts: np.ndarray, level: int) -> np.ndarray:
        return (pts - self.origin) / self.voxel_size(level)

    def record(self, points) -> InterpRecord:
        """Locate the 8 corners on every level; no feature values are read."""
        pts = as_points(points)
        out = []
        for lv, table in enumerate(self.levels):
            g = self.grid_coords(pts, lv)
            vox = np.floor(g)
            frac = g - vox
            corners = vox.astype(np.int64)[:, None, :] + CORNER_OFFSETS[None]
            inside = np.all((corners >= 0) & (corners < AXIS_LIMIT), axis=2)
            codes = _encode_rows(np.clip(corners, 0, AXIS_LIMIT - 1))
            idx = table.lookup(codes)
            idx[~inside] = MISSING
            self.lookups += idx.size
            out.append(LevelRecord(idx, trilinear_weights(frac), frac, self.voxel_size(lv)))
        return InterpRecord(out)

    def leaf_occupied(self, points, dilate: int = 1) -> np.ndarray:
        """True where an allocated leaf voxel lies within ``dilate`` voxels."""
        pts = as_points(points)
        vox = np.floor(self.grid_coords(pts, 0)).astype(np.int64)
        hit = np.zeros(len(pts), dtype=bool)
        rng = range(-dilate, dilate + 1)
        for dx in rng:
            for dy in rng:
                for dz in rng:
                    nb = vox + np.array([dx, dy, dz])
                    ok = np.all((nb >= 0) & (nb < AXIS_LIMIT), axis=1)
                    codes = _encode_rows(np.clip(nb, 0, AXIS_LIMIT - 1))
                    pos = np.minimum(np.searchsorted(self.leaf_voxels, codes), max(len(self.leaf_voxels) - 1, 0))
                    if len(self.leaf_voxels):
                        hit |= ok & (self.leaf_voxels[pos] == codes)
        return hit

    def corner_positions(self, level: int) -> np.ndarray:
        i, j, k = morton_decode(self.levels[level].keys)
        return self.origin + self.voxel_size(level) * np.stack([i, j, k], axis=1)

    def copy(self) -> "LatentOctree":
        return LatentOctree(self.origin.copy(), self.leaf_voxel, self.num_levels, self.dim,
                            [LevelTable(l.keys.copy(), l.features.copy()) for l in self.levels],
                            self.leaf_voxels.copy())

    # -- serialization --------------------------------------------------

    def to_bytes(self) -> bytes:
        b = io.BytesIO()
        b.write(OCT_MAGIC)
        b.write(struct.pack("<3ddII", *self.origin, self.leaf_voxel, self.num_levels, self.dim))
        for l in self.levels:
            b.write(struct.pack("<Q", len(l.keys)))
            b.write(l.keys.astype("<u8").tobytes())
            b.write(np.ascontiguousarray(l.features, dtype="<f8").tobytes())
        b.write(struct.pack("<Q", len(self.leaf_voxels)))
        b.write(self.leaf_voxels.astype("<u8").tobytes())
        return b.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "LatentOctree":
        if not data.startswith(OCT_MAGIC):
            raise FormatError("bad octree section magic")
        b = io.BytesIO(data[len(OCT_MAGIC):])
        hdr = struct.Struct("<3ddII")
        ox, oy, oz, leaf, h, d = hdr.unpack(b.read(hdr.size))
        levels = []
        for _ in range(h):
            (n,) = struct.unpack("<Q", b.read(8))
            keys = np.frombuffer(b.read(8 * n), dtype="<u8").astype(np.uint64)
            feats = np.frombuffer(b.read(8 * n * d), dtype="<f8").reshape(n, d).astype(np.float64)
            levels.append(LevelTable(keys, feats))
        (n,) = struct.unpack("<Q", b.read(8))
        leaves = np.frombuffer(b.read(8 * n), dtype="<u8").astype(np.uint64)
        return cls(np.array([ox, oy, oz]), leaf, h, d, levels, leaves)


def build_octree(points, leaf_voxel: float = 0.2, num_levels: int = 3, dim: int = 8,
                 init: str = "zeros", origin=None) -> LatentOctree:
    """Allocate the corner features of every voxel touched by ``points``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyInputError("cannot build an octree from no points")
    if num_levels < 1 or dim < 1 or not leaf_voxel > 0:
        raise ConfigError("octree needs num_levels >= 1, dim >= 1 and leaf_voxel > 0")
    if init != "zeros":
        raise ConfigError(f"unsupported latent init {init!r}")
    top = leaf_voxel * (1 << (num_levels - 1))
    if origin is None:
        origin = (np.floor(pts.min(axis=0) / top) - 1.0) * top
    origin = np.asarray(origin, dtype=np.float64)
    tree = LatentOctree(origin, float(leaf_voxel), int(num_levels), int(dim), [])
    for lv in range(num_levels):
        vox = np.unique(np.floor(tree.grid_coords(pts, lv)).astype(np.int64), axis=0)
        if np.any(vox < 0) or np.any(vox + 1 >= AXIS_LIMIT):
            raise OverflowError("points fall outside the addressable octree extent")
        if lv == 0:
            tree.leaf_voxels = np.unique(_encode_rows(vox))
        corners = (vox[:, None, :] + CORNER_OFFSETS[None]).reshape(-1, 3)
        keys = np.unique(_encode_rows(corners))
        tree.levels.append(LevelTable(keys, np.zeros((len(keys), dim))))
    return tree


def query_features(tree: LatentOctree, p, rec: InterpRecord | None = None):
    """Summed trilinear latent code at ``p``; returns ``(latent, record)``."""
    single = np.ndim(p) == 1
    rec = tree.record(p) if rec is None else rec
    latent = np.zeros((len(rec), tree.dim))
    for table, lr in zip(tree.levels, rec.levels):
        valid = lr.index != MISSING
        feats = table.features[np.where(valid, lr.index, 0)]
        latent += np.einsum("nc,ncd->nd", lr.weights * valid, feats)
    return (latent[0] if single else latent), rec


def latent_spatial_jacobian(tree: LatentOctree, rec: InterpRecord) -> np.ndarray:
    """d latent / d p, shape (N, 3, d)."""
    jac = np.zeros((len(rec), 3, tree.dim))
    for table, lr in zip(tree.levels, rec.levels):
        valid = lr.index != MISSING
        feats = table.features[np.where(valid, lr.index, 0)] * valid[..., None]
        dw = trilinear_weight_gradients(lr.frac) / lr.voxel
        jac += np.einsum("nca,ncd->nad", dw, feats)
    return jac


def accumulate_latent_grads(tree: LatentOctree, rec: InterpRecord, upstream, grad_store: list[np.ndarray]) -> None:
    """Scatter ``upstream`` (N, d) onto the corner features it was read from."""
    up = np.asarray(upstream, dtype=np.float64).reshape(len(rec), tree.dim)
    for store, lr in zip(grad_store, rec.levels):
        valid = lr.index != MISSING
        contrib = lr.weights[..., None] * up[:, None, :]
        np.add.at(store, lr.index[valid], contrib[valid])
