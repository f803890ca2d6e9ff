"""Per-ray training samples in front of, around and behind each reading.

Every sample carries the along-ray residual ``r = tau - t`` (positive in
free space, negative behind the surface).  Samples on a ray are kept sorted
by ``t`` so the monotonicity loss can compare neighbours directly.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import ConfigError, EmptyInputError, FormatError
from .geometry import Ray
from .ingest import ScanSet

log = logging.getLogger(__name__)

TS_MAGIC = b"MIFTS1\x00"
TIE_STEP = 1e-9


class Segment(IntEnum):
    FREE = 0
    NEAR = 1
    OCCLUDED = 2


@dataclass(frozen=True)
class SampleConfig:
    m_free: int = 4
    m_surf: int = 3
    m_occ: int = 2
    eps: float = 0.05
    gamma: float = 1.0
    theta: float = 0.3
    rng_seed: int = 0

    def __post_init__(self):
        counts = (self.m_free, self.m_surf, self.m_occ)
        if min(counts) < 0 or max(counts) == 0:
            raise ConfigError("sample counts must be >= 0 with at least one positive")
        if not (self.eps > 0 and self.gamma > 0 and self.theta > 0):
            raise ConfigError("eps, gamma and theta must be positive")

    @property
    def per_ray(self) -> int:
        return self.m_free + self.m_surf + self.m_occ


@dataclass(frozen=True)
class QuerySample:
    point: np.ndarray
    t: float
    residual: float
    segment: Segment


@dataclass(frozen=True)
class RaySamples:
    ray: Ray
    samples: tuple[QuerySample, ...]
    surface_point: np.ndarray


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.uint64)
    z = x + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def ray_uniforms(seed: int, ray_index: np.ndarray, n: int) -> np.ndarray:
    """Uniforms in [0, 1) from a counter-based stream keyed on (seed, ray index).

    A ray's draws depend only on the seed and its own index, so rays can be
    sampled in any order or in parallel with identical results.
    """
    ray_index = np.atleast_1d(np.asarray(ray_index, dtype=np.uint64))
    key = _splitmix64(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))
    ray_key = _splitmix64(key ^ _splitmix64(ray_index))
    j = np.arange(n, dtype=np.uint64) * np.uint64(0xD1B54A32D192ED03)
    z = _splitmix64(ray_key[:, None] + j[None, :])
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def segment_bounds(tau: np.ndarray, cfg: SampleConfig) -> tuple[np.ndarray, ...]:
    """Per-ray (lo, hi) limits of the free, near and occluded segments."""
    tau = np.asarray(tau, dtype=np.float64)
    free_lo = np.maximum(tau - cfg.gamma - cfg.eps, 0.0)
    free_hi = np.maximum(tau - cfg.eps, free_lo)
    return (free_lo, free_hi, tau - cfg.eps, tau + cfg.eps,
            tau + cfg.eps, tau + cfg.eps + cfg.theta)


def _draw(tau: np.ndarray, u: np.ndarray, cfg: SampleConfig):
    """Map uniforms ``u`` (R, M) to sorted ``t``, residuals and segment tags."""
    fl, fh, nl, nh, ol, oh = segment_bounds(tau, cfg)
    mf, ms = cfg.m_free, cfg.m_surf
    lo = np.concatenate([np.repeat(fl[:, None], mf, 1), np.repeat(nl[:, None], ms, 1),
                         np.repeat(ol[:, None], cfg.m_occ, 1)], axis=1)
    hi = np.concatenate([np.repeat(fh[:, None], mf, 1), np.repeat(nh[:, None], ms, 1),
                         np.repeat(oh[:, None], cfg.m_occ, 1)], axis=1)
    seg = np.concatenate([np.full(mf, Segment.FREE), np.full(ms, Segment.NEAR),
                          np.full(cfg.m_occ, Segment.OCCLUDED)]).astype(np.int8)
    t = lo + u * (hi - lo)
    order = np.argsort(t, axis=1, kind="stable")
    t = np.take_along_axis(t, order, axis=1)
    seg = seg[order]
    for m in range(1, t.shape[1]):
        tie = t[:, m] <= t[:, m - 1]
        if tie.any():
            t[tie, m] = t[tie, m - 1] + TIE_STEP
    return t, tau[:, None] - t, seg


def sample_ray(ray: Ray, cfg: SampleConfig, rng: np.random.Generator) -> RaySamples:
    tau = np.array([ray.depth])
    if ray.depth - cfg.gamma - cfg.eps <= 0:
        log.warning("ray depth %.3f shorter than gamma+eps; free segment clamped to start at 0", ray.depth)
    u = rng.random((1, cfg.per_ray))
    t, r, seg = _draw(tau, u, cfg)
    samples = tuple(
        QuerySample(ray.at(t[0, m]), float(t[0, m]), float(r[0, m]), Segment(int(seg[0, m])))
        for m in range(cfg.per_ray)
    )
    return RaySamples(ray, samples, ray.at(ray.depth))


@dataclass(eq=False)
class TrainingSet:
    """Struct-of-arrays over R rays with M samples each."""

    origins: np.ndarray       # (R, 3)
    directions: np.ndarray    # (R, 3)
    depths: np.ndarray        # (R,)
    t: np.ndarray             # (R, M) ascending per row
    residuals: np.ndarray     # (R, M)
    segments: np.ndarray      # (R, M) int8 Segment tags
    surface_points: np.ndarray  # (R, 3)
    cfg: SampleConfig

    @property
    def num_rays(self) -> int:
        return len(self.depths)

    @property
    def per_ray(self) -> int:
        return self.t.shape[1]

    def points(self, rays=None) -> np.ndarray:
        """Sample positions ``o + t d``, shape (R, M, 3)."""
        sl = slice(None) if rays is None else rays
        return self.origins[sl, None, :] + self.t[sl, :, None] * self.directions[sl, None, :]

    def ray(self, i: int) -> RaySamples:
        ray = Ray(self.origins[i], self.directions[i], self.depths[i])
        pts = self.points([i])[0]
        samples = tuple(
            QuerySample(pts[m], float(self.t[i, m]), float(self.residuals[i, m]), Segment(int(self.segments[i, m])))
            for m in range(self.per_ray)
        )
        return RaySamples(ray, samples, self.surface_points[i])

    def near_surface_points(self) -> np.ndarray:
        """Readings plus every near-segment sample (the octree support)."""
        near = self.points()[self.segments == Segment.NEAR]
        return np.concatenate([self.surface_points, near], axis=0)

    def identical(self, other: "TrainingSet") -> bool:
        names = ("origins", "directions", "depths", "t", "residuals", "segments", "surface_points")
        return self.cfg == other.cfg and all(
            getattr(self, n).tobytes() == getattr(other, n).tobytes() for n in names)

    def save(self, path) -> None:
        c = self.cfg
        with open(path, "wb") as fh:
            fh.write(TS_MAGIC)
            fh.write(struct.pack("<QQ3I3dq", self.num_rays, self.per_ray, c.m_free, c.m_surf, c.m_occ,
                                 c.eps, c.gamma, c.theta, c.rng_seed))
            for a in (self.origins, self.directions, self.depths, self.t, self.residuals, self.surface_points):
                fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
            fh.write(self.segments.astype("<i1").tobytes())

    @classmethod
    def load(cls, path) -> "TrainingSet":
        with open(path, "rb") as fh:
            data = fh.read()
        if not data.startswith(TS_MAGIC):
            raise FormatError("not a training-set cache (bad magic)")
        buf = io.BytesIO(data[len(TS_MAGIC):])
        hdr = struct.Struct("<QQ3I3dq")
        r, m, mf, ms, mo, eps, gamma, theta, seed = hdr.unpack(buf.read(hdr.size))
        cfg = SampleConfig(mf, ms, mo, eps, gamma, theta, seed)

        def arr(shape):
            n = int(np.prod(shape))
            return np.frombuffer(buf.read(8 * n), dtype="<f8").reshape(shape).astype(np.float64)

        o, d, tau, t, res, surf = arr((r, 3)), arr((r, 3)), arr((r,)), arr((r, m)), arr((r, m)), arr((r, 3))
        seg = np.frombuffer(buf.read(r * m), dtype="<i1").reshape(r, m).copy()
        return cls(o, d, tau, t, res, seg, surf, cfg)


def build_training_set(scanset: ScanSet, cfg: SampleConfig) -> TrainingSet:
    if scanset is None or not scanset.scans:
        raise EmptyInputError("empty scan set")
    origins, readings = [], []
    for s in scanset.scans:
        w = s.world_points
        readings.append(w)
        origins.append(np.broadcast_to(s.sensor_origin, w.shape))
    o = np.concatenate(origins)
    p = np.concatenate(readings)
    if len(p) == 0:
        raise EmptyInputError("scan set has no points")
    v = p - o
    tau = np.linalg.norm(v, axis=1)
    keep = tau > 0
    o, p, v, tau = o[keep], p[keep], v[keep], tau[keep]
    d = v / tau[:, None]
    short = int(np.count_nonzero(tau - cfg.gamma - cfg.eps <= 0))
    if short:
        log.warning("%d rays shorter than gamma+eps; free segments clamped at the sensor", short)
    u = ray_uniforms(cfg.rng_seed, np.arange(len(tau)), cfg.per_ray)
    t, r, seg = _draw(tau, u, cfg)
    return TrainingSet(np.ascontiguousarray(o), d, tau, t, r, seg, p.copy(), cfg)
