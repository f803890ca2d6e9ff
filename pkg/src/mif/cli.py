"""Command-line frontend: simulate, preprocess, train, mesh, eval, pipeline.

Every command writes ``run_manifest.json`` into its output directory.  On
failure a single JSON object goes to stderr and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import pipeline as pl
from .checkpoint import load_checkpoint
from .config import RunConfig, load_config, weights_context
from .errors import MifError
from .evalmetrics import MetricParams
from .ingest import POSE_FORMATS, SCAN_FORMATS, ScanSet
from .meshing import read_mesh

log = logging.getLogger("mif")

EXIT_ERROR = 2
EXIT_INTERNAL = 3


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.threads is not None:
        kw["threads"] = args.threads
    if getattr(args, "iterations", None) is not None:
        kw["train"] = replace(cfg.train, iterations=args.iterations)
    if getattr(args, "spacing", None) is not None:
        kw["mesh"] = replace(cfg.mesh, spacing=args.spacing)
    return replace(cfg, **kw) if kw else cfg


def _write_manifest(out_dir: Path, command: str, cfg: RunConfig, inputs: dict, outputs: dict,
                    extra: dict | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    man = {"command": command, "config": cfg.to_dict(), "config_hash": cfg.config_hash(),
           "seeds": {"run": cfg.seed, "sample": cfg.sample.rng_seed, "decoder_init": cfg.decoder.init_seed,
                     "batches": cfg.train.seed, "metrics": cfg.metrics.seed},
           "threads": cfg.threads, "inputs": inputs, "outputs": outputs}
    if extra:
        man.update(extra)
    (out_dir / "run_manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")


def cmd_simulate(args, cfg: RunConfig) -> dict:
    out = Path(args.out)
    res = pl.simulate(args.scene, out)
    _write_manifest(out, "simulate", cfg, {"scene": str(args.scene)}, res,
                    {"seeds_scanner": res["scanner_seed"]})
    return res


def cmd_preprocess(args, cfg: RunConfig) -> dict:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ss = pl.preprocess(args.scans, cfg, args.poses, args.scan_format, args.pose_format)
    pl.save_scanset(out / "scanset.npz", ss, cfg)
    res = {"scanset": str(out / "scanset.npz"), "points": ss.num_points}
    _write_manifest(out, "preprocess", cfg, {"scans": str(args.scans), "poses": str(args.poses)}, res)
    return res


def cmd_train(args, cfg: RunConfig) -> dict:
    out = Path(args.out)
    ss = ScanSet.load(args.scanset)
    cfg = replace(cfg, train=replace(cfg.train, checkpoint_dir=str(out)))
    _, opt, history = pl.train_stage(ss, cfg, out, resume=args.resume)
    res = {"checkpoint": str(out / "checkpoint.mif"), "losses": str(out / "losses.csv"),
           "iteration": opt.step, "final_total": history[-1]["total"]}
    _write_manifest(out, "train", cfg, {"scanset": str(args.scanset), "resume": args.resume}, res)
    return res


def cmd_mesh(args, cfg: RunConfig) -> dict:
    model, _, manifest = load_checkpoint(args.checkpoint)
    if "config" in manifest and not args.config:
        cfg = replace(RunConfig.from_dict(manifest["config"]), threads=cfg.threads)
        if args.spacing is not None:
            cfg = replace(cfg, mesh=replace(cfg.mesh, spacing=args.spacing))
    if args.no_mask:
        cfg = replace(cfg, mesh=replace(cfg.mesh, masked=False))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    mesh = pl.mesh_stage(model, cfg, out)
    res = {"mesh": str(out), "vertices": len(mesh.vertices), "triangles": len(mesh.triangles)}
    _write_manifest(out.parent, "mesh", cfg, {"checkpoint": str(args.checkpoint)}, res)
    return res


def cmd_eval(args, cfg: RunConfig) -> dict:
    m = cfg.metrics
    params = MetricParams(args.resolution if args.resolution is not None else m.resolution,
                          args.truncation if args.truncation is not None else m.truncation,
                          args.threshold if args.threshold is not None else m.threshold, m.seed)
    out = Path(args.out)
    rep = pl.eval_stage(read_mesh(args.pred), read_mesh(args.gt), params, out, weights_context(cfg))
    res = {"metrics": str(out / "metrics.json"), "f_score": rep.f_score, "chamfer_l1": rep.chamfer_l1}
    _write_manifest(out, "eval", cfg, {"pred": str(args.pred), "gt": str(args.gt)}, res)
    return res


def cmd_pipeline(args, cfg: RunConfig) -> dict:
    out = Path(args.out)
    r = pl.pipeline(args.source, cfg, out, args.reference)
    res = {"mesh": str(out / "mesh.ply"), "checkpoint": str(out / "checkpoint.mif"),
           "losses": str(out / "losses.csv")}
    if r.report is not None:
        res.update({"metrics": str(out / "metrics.json"), "f_score": r.report.f_score,
                    "chamfer_l1": r.report.chamfer_l1})
    _write_manifest(out, "pipeline", cfg, {"source": str(args.source), "reference": args.reference}, res)
    return res


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (see mif.config for the schema)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--threads", type=int, help="worker/BLAS threads; 1 gives bitwise-reproducible runs")
    common.add_argument("--out", required=True, help="output directory (mesh: output file)")

    p = argparse.ArgumentParser(prog="mif", description="Monotonic implicit surface reconstruction from LiDAR scans.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="synthesize scans and a reference mesh from a scene")
    s.add_argument("scene", help="scene JSON")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("preprocess", parents=[common], help="filter scans into a cached scan set")
    s.add_argument("scans", help="directory of scan files")
    s.add_argument("--poses", help="pose file (default: <scans>/poses.txt)")
    s.add_argument("--scan-format", default="kitti-bin", choices=SCAN_FORMATS)
    s.add_argument("--pose-format", default="kitti-3x4-rows", choices=POSE_FORMATS)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", parents=[common], help="fit the field to a scan set")
    s.add_argument("scanset", help="scanset.npz from preprocess")
    s.add_argument("--iterations", type=int)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("mesh", parents=[common], help="extract the zero level set of a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--spacing", type=float)
    s.add_argument("--no-mask", action="store_true", help="extract in every cell, not only near the octree")
    s.set_defaults(func=cmd_mesh)

    s = sub.add_parser("eval", parents=[common], help="compare a predicted mesh with a reference mesh")
    s.add_argument("pred")
    s.add_argument("gt")
    s.add_argument("--resolution", type=float)
    s.add_argument("--truncation", type=float)
    s.add_argument("--threshold", type=float)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("pipeline", parents=[common], help="simulate/preprocess/train/mesh/eval in one run")
    s.add_argument("source", help="scene JSON or scan directory containing poses.txt")
    s.add_argument("--reference", help="reference mesh when the source is a scan directory")
    s.add_argument("--iterations", type=int)
    s.add_argument("--spacing", type=float)
    s.set_defaults(func=cmd_pipeline)
    return p


def _error_line(command: str | None, kind: str, message: str, **extra) -> str:
    return json.dumps({"error": kind, "command": command, "message": message, **extra}, sort_keys=True)


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("MIF_LOG", "WARNING").upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        with threadpool_limits(limits=cfg.threads):
            res = args.func(args, cfg)
    except MifError as e:
        extra = {k: v for k, v in vars(e).items() if isinstance(v, (int, float, str)) and k != "kind"}
        print(_error_line(args.command, e.kind, str(e), **extra), file=sys.stderr)
        return EXIT_ERROR
    except (ValueError, OverflowError) as e:
        print(_error_line(args.command, "invalid-input", str(e)), file=sys.stderr)
        return EXIT_ERROR
    except Exception as e:  # noqa: BLE001 - reported as a machine-readable line
        print(_error_line(args.command, "internal", f"{type(e).__name__}: {e}"), file=sys.stderr)
        return EXIT_INTERNAL
    print(json.dumps(res, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
