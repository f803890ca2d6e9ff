"""Mesh-to-mesh reconstruction metrics on area-uniform surface samples."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, EmptyInputError
from .meshing import Mesh


@dataclass(frozen=True)
class MetricParams:
    resolution: float = 0.02
    truncation: float = 2.0
    threshold: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if not (self.resolution > 0 and self.truncation > 0 and self.threshold > 0):
            raise ConfigError("metric parameters must be positive")


@dataclass
class MetricsReport:
    accuracy: float
    completion: float
    chamfer_l1: float
    chamfer_l2: float
    precision: float
    recall: float
    f_score: float
    n_pred: int
    n_gt: int
    params: MetricParams
    context: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["params"] = asdict(self.params)
        return d

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, indent=2, sort_keys=True)

    def to_csv(self, path) -> None:
        flat = {k: v for k, v in self.as_dict().items() if k not in ("params", "context")}
        flat.update({f"param_{k}": v for k, v in asdict(self.params).items()})
        flat.update({f"ctx_{k}": v for k, v in self.context.items()})
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(flat))
            w.writeheader()
            w.writerow(flat)


def sample_mesh_uniform(mesh: Mesh, resolution: float, seed: int = 0) -> np.ndarray:
    """Area-weighted random surface points, ``round(area / resolution^2)`` of them."""
    if len(mesh.triangles) == 0:
        raise EmptyInputError("cannot sample an empty mesh")
    areas = mesh.triangle_areas()
    total = float(areas.sum())
    if total <= 0:
        raise EmptyInputError("mesh has zero area")
    n = max(1, int(round(total / resolution ** 2)))
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=n, p=areas / total)
    u = rng.random((n, 2))
    su = np.sqrt(u[:, 0])
    a, b, c = (mesh.vertices[mesh.triangles[tri, i]] for i in range(3))
    return (1 - su)[:, None] * a + (su * (1 - u[:, 1]))[:, None] * b + (su * u[:, 1])[:, None] * c


def nearest_distances(query: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Euclidean distance from each query point to its nearest target point."""
    if len(target) == 0:
        raise EmptyInputError("empty target point set")
    d, _ = cKDTree(target).query(query, k=1)
    return d


def point_metrics(pred: np.ndarray, gt: np.ndarray, params: MetricParams = MetricParams()) -> dict:
    d_pg = nearest_distances(pred, gt)
    d_gp = nearest_distances(gt, pred)
    d_gp_t = np.minimum(d_gp, params.truncation)
    acc = float(d_pg.mean())
    comp = float(d_gp_t.mean())
    p = float(np.mean(d_pg <= params.threshold))
    r = float(np.mean(d_gp <= params.threshold))
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return {
        "accuracy": acc,
        "completion": comp,
        "chamfer_l1": 0.5 * (acc + comp),
        "chamfer_l2": 0.5 * (float(np.mean(d_pg ** 2)) + float(np.mean(d_gp_t ** 2))),
        "precision": p,
        "recall": r,
        "f_score": f,
        "n_pred": len(pred),
        "n_gt": len(gt),
    }


def reconstruction_metrics(pred: Mesh, gt: Mesh, params: MetricParams = MetricParams(),
                           context: dict | None = None) -> MetricsReport:
    """Accuracy, truncated completion, chamfer and P/R/F between two meshes."""
    ps = sample_mesh_uniform(pred, params.resolution, params.seed)
    gs = sample_mesh_uniform(gt, params.resolution, params.seed)
    return MetricsReport(**point_metrics(ps, gs, params), params=params, context=dict(context or {}))
