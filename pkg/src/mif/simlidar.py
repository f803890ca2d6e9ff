"""Synthetic LiDAR over analytic signed-distance scenes.

Scenes are unions of exact primitives.  Rays are cast by sphere tracing, so
any 1-Lipschitz composition works; closed-form intersections serve only as
test oracles.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestIOError
from .geometry import Aabb, Pose, as_points, rotation_about_axis
from .ingest import Scan, ScanSet
from .meshing import Mesh, marching_cubes, sample_function

log = logging.getLogger(__name__)

HIT_TOL = 1e-6
MAX_STEPS = 4000


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    invert: bool = False

    def sdf(self, p: np.ndarray) -> np.ndarray:
        d = np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius
        return -d if self.invert else d

    def bounds(self) -> Aabb:
        c = np.asarray(self.center, dtype=np.float64)
        return Aabb(c - self.radius, c + self.radius)


@dataclass(frozen=True)
class Box:
    center: tuple
    half_extents: tuple
    invert: bool = False

    def sdf(self, p: np.ndarray) -> np.ndarray:
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        d = outside + inside
        return -d if self.invert else d

    def bounds(self) -> Aabb:
        c, h = np.asarray(self.center, dtype=np.float64), np.asarray(self.half_extents, dtype=np.float64)
        return Aabb(c - h, c + h)


@dataclass(frozen=True)
class Plane:
    normal: tuple
    offset: float
    invert: bool = False

    def __post_init__(self):
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-9:
            raise ConfigError("plane normal must be unit length")

    def sdf(self, p: np.ndarray) -> np.ndarray:
        d = p @ np.asarray(self.normal) - self.offset
        return -d if self.invert else d

    def bounds(self) -> Aabb | None:
        return None


PRIMITIVES = {"sphere": Sphere, "box": Box, "plane": Plane}


@dataclass(frozen=True)
class SdfScene:
    primitives: tuple
    smooth_k: float = 0.0   # 0 = plain min union

    def __post_init__(self):
        if not self.primitives:
            raise ConfigError("scene needs at least one primitive")
        if self.smooth_k < 0:
            raise ConfigError("smooth_k must be >= 0")

    def bounds(self) -> Aabb:
        boxes = [b for b in (p.bounds() for p in self.primitives) if b is not None]
        if not boxes:
            raise ConfigError("scene has no bounded primitive")
        out = boxes[0]
        for b in boxes[1:]:
            out = out.union(b)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SdfScene":
        prims = []
        for i, spec in enumerate(d.get("primitives", [])):
            spec = dict(spec)
            kind = spec.pop("type", None)
            if kind not in PRIMITIVES:
                raise ConfigError(f"primitive {i}: unknown type {kind!r}")
            for k in ("center", "half_extents", "normal"):
                if k in spec:
                    spec[k] = tuple(float(x) for x in spec[k])
            try:
                prims.append(PRIMITIVES[kind](**spec))
            except TypeError as e:
                raise ConfigError(f"primitive {i}: {e}") from e
        return cls(tuple(prims), float(d.get("smooth_k", 0.0)))


def smooth_min(a: np.ndarray, b: np.ndarray, k: float) -> np.ndarray:
    """Polynomial smooth minimum; equals ``min`` when ``k`` is 0."""
    if k <= 0:
        return np.minimum(a, b)
    h = np.clip(0.5 + 0.5 * (b - a) / k, 0.0, 1.0)
    return b * (1 - h) + a * h - k * h * (1 - h)


def scene_sdf(scene: SdfScene, p) -> np.ndarray:
    """Signed distance of ``p`` (3,) or (N, 3); scalar input gives a 0-d array."""
    p = np.asarray(p, dtype=np.float64)
    d = scene.primitives[0].sdf(p)
    for prim in scene.primitives[1:]:
        d = smooth_min(d, prim.sdf(p), scene.smooth_k)
    return d


def cast_rays(scene: SdfScene, origins, directions, max_range: float) -> np.ndarray:
    """Sphere-trace many rays; returns hit depths with ``inf`` for misses."""
    o = as_points(origins)
    d = as_points(directions)
    if len(o) == 1 and len(d) > 1:
        o = np.broadcast_to(o, d.shape)
    n = len(d)
    t = np.zeros(n)
    out = np.full(n, np.inf)
    act = np.arange(n)
    for _ in range(MAX_STEPS):
        if len(act) == 0:
            break
        s = scene_sdf(scene, o[act] + t[act, None] * d[act])
        hit = np.abs(s) < HIT_TOL
        out[act[hit]] = t[act[hit]]
        t[act] += np.abs(s)
        act = act[~hit & (t[act] <= max_range)]
    return _polish(scene, o, d, out)


def _polish(scene: SdfScene, o: np.ndarray, d: np.ndarray, t: np.ndarray, steps: int = 3) -> np.ndarray:
    """Newton steps on the along-ray SDF; grazing hits stop short otherwise."""
    idx = np.flatnonzero(np.isfinite(t))
    h = 1e-7
    for _ in range(steps):
        if len(idx) == 0:
            break
        ti = t[idx]
        s = scene_sdf(scene, o[idx] + ti[:, None] * d[idx])
        sp = scene_sdf(scene, o[idx] + (ti + h)[:, None] * d[idx])
        sm = scene_sdf(scene, o[idx] + (ti - h)[:, None] * d[idx])
        slope = (sp - sm) / (2 * h)
        ok = np.abs(slope) > 1e-3
        tn = ti - np.where(ok, s / np.where(ok, slope, 1.0), 0.0)
        sn = scene_sdf(scene, o[idx] + tn[:, None] * d[idx])
        better = ok & (np.abs(sn) < np.abs(s)) & (tn > 0)
        t[idx[better]] = tn[better]
        idx = idx[better]
    return t


def cast_ray(scene: SdfScene, origin, direction, max_range: float) -> float | None:
    """Depth of the first hit along a unit ``direction``, or None on a miss."""
    direction = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise ValueError("direction must be unit length")
    t = cast_rays(scene, origin, direction, max_range)[0]
    return None if not np.isfinite(t) or t > max_range else float(t)


@dataclass(frozen=True)
class ScannerSpec:
    azimuths: int = 360
    elevations_deg: tuple = tuple(np.linspace(-60.0, 60.0, 64).tolist())
    max_range: float = 50.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.azimuths < 1 or len(self.elevations_deg) < 1:
            raise ConfigError("scanner needs at least one azimuth and one elevation")
        if not self.max_range > 0:
            raise ConfigError("max_range must be positive")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "ScannerSpec":
        d = dict(d)
        if "elevation_range" in d:
            lo, hi, count = d.pop("elevation_range")
            d["elevations_deg"] = tuple(np.linspace(lo, hi, int(count)).tolist())
        elif "elevations_deg" in d:
            d["elevations_deg"] = tuple(float(x) for x in d["elevations_deg"])
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"scanner: {e}") from e

    def directions(self) -> np.ndarray:
        """Sensor-frame unit directions, azimuth-major, shape (A * E, 3)."""
        az = 2 * np.pi * np.arange(self.azimuths) / self.azimuths
        el = np.radians(np.asarray(self.elevations_deg, dtype=np.float64))
        a, e = np.meshgrid(az, el, indexing="ij")
        return np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1).reshape(-1, 3)


def simulate_scan(scene: SdfScene, pose: Pose, spec: ScannerSpec, index: int = 0) -> Scan:
    """One scan from ``pose``; ``index`` keys the noise stream so scans are independent."""
    ds = spec.directions()
    dw = ds @ pose.rotation.T
    depth = cast_rays(scene, pose.translation, dw, spec.max_range)
    hit = np.isfinite(depth) & (depth <= spec.max_range)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng([spec.seed, index])
        depth = depth + spec.noise_sigma * rng.standard_normal(len(depth))
        hit &= depth > 0
    return Scan(ds[hit] * depth[hit, None], pose)


def look_at_yaw(position, target) -> Pose:
    """Level pose at ``position`` whose +x axis faces ``target`` in the xy plane."""
    position = np.asarray(position, dtype=np.float64)
    v = np.asarray(target, dtype=np.float64) - position
    yaw = float(np.arctan2(v[1], v[0])) if np.hypot(v[0], v[1]) > 0 else 0.0
    return Pose(rotation_about_axis([0, 0, 1], yaw), position)


def ring_poses(count: int, radius: float, height: float = 0.0, center=(0.0, 0.0, 0.0),
               phase_deg: float = 0.0) -> list[Pose]:
    c = np.asarray(center, dtype=np.float64)
    out = []
    for k in range(count):
        a = np.radians(phase_deg) + 2 * np.pi * k / count
        pos = c + np.array([radius * np.cos(a), radius * np.sin(a), height])
        out.append(look_at_yaw(pos, c + np.array([0.0, 0.0, height])))
    return out


def _poses(spec) -> list[Pose]:
    if spec is None:
        return []
    if isinstance(spec, dict):
        return ring_poses(int(spec["count"]), float(spec["radius"]), float(spec.get("height", 0.0)),
                          spec.get("center", (0.0, 0.0, 0.0)), float(spec.get("phase_deg", 0.0)))
    return [Pose.from_matrix(np.asarray(m, dtype=np.float64)) for m in spec]


@dataclass(frozen=True)
class SceneDoc:
    """A scene file: geometry, scanner, sensor poses and held-out poses."""

    scene: SdfScene
    scanner: ScannerSpec
    poses: tuple
    heldout_poses: tuple = ()
    name: str = "scene"
    raw: dict = field(default_factory=dict, compare=False)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneDoc":
        poses = _poses(d.get("poses"))
        if not poses:
            raise ConfigError("scene needs at least one sensor pose")
        return cls(SdfScene.from_dict(d), ScannerSpec.from_dict(d.get("scanner", {})), tuple(poses),
                   tuple(_poses(d.get("heldout_poses"))), str(d.get("name", "scene")), d)


def load_scene(path) -> SceneDoc:
    try:
        d = json.loads(Path(path).read_text())
    except OSError as e:
        raise IngestIOError(f"cannot read scene {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"scene {path} is not valid JSON: {e}") from e
    return SceneDoc.from_dict(d)


def bundled_scene_path(name: str = "sphere_room") -> Path:
    return Path(str(resources.files("mif") / "scenes" / f"{name}.json"))


def simulate_scanset(doc: SceneDoc, poses=None, spec: ScannerSpec | None = None, first_index: int = 0) -> list[Scan]:
    """Scans from ``poses`` (default: the scene's); noise streams start at ``first_index``."""
    spec = spec or doc.scanner
    poses = doc.poses if poses is None else poses
    return [simulate_scan(doc.scene, p, spec, first_index + i) for i, p in enumerate(poses)]


def reference_mesh(scene: SdfScene, spacing: float = 0.02, bounds: Aabb | None = None) -> Mesh:
    """Marching cubes on the exact scene SDF."""
    b = (bounds or scene.bounds()).padded(2 * spacing)
    grid = sample_function(lambda p: scene_sdf(scene, p), b, spacing)
    return marching_cubes(grid)


def as_scanset(scans: list[Scan]) -> ScanSet:
    return ScanSet.from_scans(scans)
