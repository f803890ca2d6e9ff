"""Core 3D value types: rigid poses, axis-aligned boxes and sensor rays.

Points are plain ``numpy`` arrays of shape ``(3,)`` (or ``(N, 3)`` for
batches); every length is in meters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MifError

ORTHO_TOL = 1e-6


class GeometryError(MifError, ValueError):
    kind = "geometry-error"


def as_points(p) -> np.ndarray:
    """Return ``p`` as a float64 array of shape ``(N, 3)``."""
    a = np.asarray(p, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, 3)
    if a.ndim != 2 or a.shape[1] != 3:
        raise GeometryError(f"expected points of shape (N, 3), got {a.shape}")
    return a


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> R @ x + t`` (sensor frame to world frame)."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = _frozen(self.rotation).reshape(3, 3)
        t = _frozen(self.translation).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise GeometryError("pose contains non-finite values")
        if np.abs(r @ r.T - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(r) - 1.0) > ORTHO_TOL:
            raise GeometryError("rotation is not orthonormal with det +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape not in ((4, 4), (3, 4)):
            raise GeometryError(f"expected a 3x4 or 4x4 matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(np.array_equal(self.rotation, other.rotation) and np.array_equal(self.translation, other.translation))

    __hash__ = None


def transform_point(pose: Pose, p) -> np.ndarray:
    """Apply ``pose`` to a point ``(3,)`` or a batch ``(N, 3)``."""
    a = np.asarray(p, dtype=np.float64)
    out = as_points(a) @ pose.rotation.T + pose.translation
    return out[0] if a.ndim == 1 else out


def invert_pose(pose: Pose) -> Pose:
    rt = pose.rotation.T
    return Pose(rt, -rt @ pose.translation)


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a rotation of ``angle`` radians."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * kx + (1.0 - np.cos(angle)) * (kx @ kx)


def nearest_rotation(m) -> np.ndarray:
    """Project a 3x3 matrix onto SO(3) (polar decomposition via SVD)."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=np.float64))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


@dataclass(frozen=True, eq=False)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = _frozen(self.min).reshape(3)
        hi = _frozen(self.max).reshape(3)
        if np.any(lo > hi):
            raise GeometryError(f"invalid box: min {lo} > max {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @classmethod
    def of_points(cls, pts) -> "Aabb":
        pts = as_points(pts)
        if len(pts) == 0:
            raise GeometryError("cannot bound an empty point set")
        return cls(pts.min(axis=0), pts.max(axis=0))

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    def padded(self, pad: float) -> "Aabb":
        return Aabb(self.min - pad, self.max + pad)

    def union(self, other: "Aabb") -> "Aabb":
        return Aabb(np.minimum(self.min, other.min), np.maximum(self.max, other.max))

    def contains(self, pts) -> np.ndarray:
        pts = as_points(pts)
        return np.all((pts >= self.min) & (pts <= self.max), axis=1)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Aabb):
            return NotImplemented
        return bool(np.array_equal(self.min, other.min) and np.array_equal(self.max, other.max))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Ray:
    """Sensor ray: origin ``o``, unit direction ``d`` and measured depth ``tau``."""

    origin: np.ndarray
    direction: np.ndarray
    depth: float

    def __post_init__(self):
        o = _frozen(self.origin).reshape(3)
        d = _frozen(self.direction).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise GeometryError("ray direction must have unit norm")
        if not self.depth > 0:
            raise GeometryError("ray depth must be positive")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "depth", float(self.depth))

    @classmethod
    def through(cls, origin, reading) -> "Ray":
        o = np.asarray(origin, dtype=np.float64)
        v = np.asarray(reading, dtype=np.float64) - o
        tau = float(np.linalg.norm(v))
        if tau <= 0:
            raise GeometryError("reading coincides with the sensor origin")
        return cls(o, v / tau, tau)

    def at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction
