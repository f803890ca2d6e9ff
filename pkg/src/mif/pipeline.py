"""Pipeline stages shared by the command line and the acceptance runs.

Each stage reads and writes files in the formats owned by the modules it
composes.  Artifacts carry the config hash; nothing time- or path-dependent
goes into them, so reruns with the same config are bitwise identical.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, weights_context
from .decoder import FieldModel, build_model
from .errors import EmptyInputError, IngestIOError
from .evalmetrics import MetricParams, MetricsReport, reconstruction_metrics
from .ingest import ScanSet, load_scan_dir, preprocess_scanset, write_kitti_bin, write_poses
from .latent_octree import build_octree
from .meshing import Mesh, evaluate_grid, marching_cubes, read_mesh, write_mesh
from .optim import OptState
from .sampler import TrainingSet, build_training_set
from .simlidar import load_scene, reference_mesh, simulate_scanset
from .training import monotone_fraction, train, write_history

log = logging.getLogger(__name__)

SCAN_DIR = "scans"
HELDOUT_DIR = "heldout"
POSES = "poses.txt"
REFERENCE = "reference.ply"


def _write_scans(dirpath: Path, scans) -> None:
    dirpath.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(scans):
        write_kitti_bin(dirpath / f"{i:06d}.bin", s.points)
    write_poses(dirpath / POSES, [s.pose for s in scans])


def simulate(scene_path, out_dir) -> dict:
    """Scans, poses, held-out scans and the analytic reference mesh."""
    doc = load_scene(scene_path)
    out = Path(out_dir)
    _write_scans(out / SCAN_DIR, simulate_scanset(doc))
    if doc.heldout_poses:
        held = simulate_scanset(doc, doc.heldout_poses, first_index=len(doc.poses))
        _write_scans(out / HELDOUT_DIR, held)
    write_mesh(out / REFERENCE, reference_mesh(doc.scene), comment=f"reference {doc.name}")
    return {"scans": str(out / SCAN_DIR), "heldout": str(out / HELDOUT_DIR) if doc.heldout_poses else None,
            "reference": str(out / REFERENCE), "scanner_seed": doc.scanner.seed}


def preprocess(scan_dir, cfg: RunConfig, poses_path=None, scan_format: str = "kitti-bin",
               pose_format: str = "kitti-3x4-rows") -> ScanSet:
    poses_path = poses_path or Path(scan_dir) / POSES
    scans, poses = load_scan_dir(scan_dir, poses_path, scan_format, pose_format)
    return preprocess_scanset(scans, poses, cfg.preprocess, cfg.threads)


def save_scanset(path, ss: ScanSet, cfg: RunConfig) -> None:
    ss.save(path, meta={"config_hash": cfg.config_hash()})


def build_field(ss: ScanSet, cfg: RunConfig) -> tuple[FieldModel, TrainingSet]:
    tset = build_training_set(ss, cfg.sample)
    o = cfg.octree
    tree = build_octree(tset.near_surface_points(), o.leaf_voxel, o.num_levels, o.dim)
    bounds = ss.world_bounds.padded(cfg.mesh.bounds_pad)
    return build_model(tree, bounds, cfg.posenc, cfg.decoder, cfg.alpha), tset


def checkpoint_manifest(cfg: RunConfig, iteration: int) -> dict:
    return {"config": cfg.to_dict(), "config_hash": cfg.config_hash(), "seed": cfg.seed, "iteration": iteration}


def train_stage(ss: ScanSet, cfg: RunConfig, out_dir, resume=None) -> tuple[FieldModel, OptState, list[dict]]:
    """Train and write ``checkpoint.mif`` plus ``losses.csv`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        model, opt, _ = load_checkpoint(resume)
        tset = build_training_set(ss, cfg.sample)
    else:
        model, tset = build_field(ss, cfg)
        opt = OptState.for_params(model.parameters(), cfg.train.opt)

    def on_ckpt(it, m, st):
        save_checkpoint(out / f"checkpoint_{it:06d}.mif", m, st, checkpoint_manifest(cfg, it))

    model, history = train(model, tset, cfg.train, opt, on_checkpoint=on_ckpt)
    save_checkpoint(out / "checkpoint.mif", model, opt, checkpoint_manifest(cfg, opt.step))
    write_history(out / "losses.csv", history, cfg.config_hash())
    return model, opt, history


def mesh_stage(model: FieldModel, cfg: RunConfig, out_path=None, spacing: float | None = None) -> Mesh:
    spacing = cfg.mesh.spacing if spacing is None else spacing
    mesh = marching_cubes(evaluate_grid(model, model.bounds, spacing, cfg.mesh.masked))
    if out_path is not None:
        write_mesh(out_path, mesh, comment=f"config_hash {cfg.config_hash()} spacing {spacing!r}")
    return mesh


def eval_stage(pred: Mesh, gt: Mesh, params: MetricParams, out_dir=None, context: dict | None = None) -> MetricsReport:
    report = reconstruction_metrics(pred, gt, params, context)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.to_json(out / "metrics.json")
        report.to_csv(out / "metrics.csv")
    return report


def heldout_monotonicity(model: FieldModel, heldout_dir, cfg: RunConfig) -> float:
    ss = preprocess(heldout_dir, cfg)
    # a different sample stream than training
    tset = build_training_set(ss, replace(cfg.sample, rng_seed=cfg.seed + 7919))
    return monotone_fraction(model, tset)


@dataclass
class PipelineResult:
    model: FieldModel
    mesh: Mesh
    report: MetricsReport | None
    history: list[dict]
    out_dir: Path


def pipeline(source, cfg: RunConfig, out_dir, reference=None) -> PipelineResult:
    """``source`` is a scene JSON (simulated first) or a scan directory with ``poses.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    src = Path(source)
    heldout = None
    if src.is_file() and src.suffix == ".json":
        sim = simulate(src, out / "sim")
        scan_dir, reference, heldout = sim["scans"], sim["reference"], sim["heldout"]
    elif src.is_dir():
        scan_dir = src
    else:
        raise IngestIOError(f"pipeline source {source} is neither a scene file nor a scan directory")
    ss = preprocess(scan_dir, cfg)
    save_scanset(out / "scanset.npz", ss, cfg)
    model, _, history = train_stage(ss, cfg, out)
    mesh = mesh_stage(model, cfg, out / "mesh.ply")
    report = None
    if reference is not None:
        ctx = weights_context(cfg)
        if heldout is not None:
            ctx["heldout_monotone_fraction"] = heldout_monotonicity(model, heldout, cfg)
        if not len(mesh):
            raise EmptyInputError("extracted mesh is empty; nothing to evaluate")
        report = eval_stage(mesh, read_mesh(reference), cfg.metrics, out, ctx)
    return PipelineResult(model, mesh, report, history, out)
