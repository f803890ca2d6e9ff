"""Ray-batched optimization of the field under the geometric loss."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass

import numpy as np

from .decoder import EvalTape, FieldModel, field_forward
from .errors import ConfigError, NonFiniteError
from .losses import LossWeights, loss_eikonal, loss_mono, loss_sign, loss_surface, total_loss
from .optim import OptConfig, OptState, adamw_step
from .sampler import TrainingSet

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("iteration", "L_surf", "L_sign", "L_mono", "L_eik", "total", "lr")


@dataclass(frozen=True)
class TrainConfig:
    batch_rays: int = 256
    iterations: int = 5000
    weights: LossWeights = LossWeights()
    opt: OptConfig = OptConfig()
    seed: int = 0
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    log_every: int = 250

    def __post_init__(self):
        if self.batch_rays < 1:
            raise ConfigError("batch_rays ≥ 1")
        if self.iterations < 1:
            raise ConfigError("iterations ≥ 1")


@dataclass
class BatchLoss:
    total: object
    parts: dict
    tape: EvalTape
    n_surface: int


def batch_loss(model: FieldModel, tset: TrainingSet, rays: np.ndarray, weights: LossWeights,
               track: bool = True, points_grad: bool = False) -> BatchLoss:
    """Forward readings + samples of ``rays`` and assemble the loss terms.

    Row layout of the evaluated batch: the B readings first, then the
    B x M samples ray by ray.
    """
    rays = np.asarray(rays)
    b, m = len(rays), tset.per_ray
    surf = tset.surface_points[rays]
    samples = tset.points(rays).reshape(b * m, 3)
    n_grad = b if weights.lambda_eik > 0 else 0
    tape = field_forward(model, np.concatenate([surf, samples]), n_grad=n_grad,
                         track=track, points_grad=points_grad)
    v = tape.values
    f_surf = v[:b]
    f_samp = v[b:]
    res = np.concatenate([np.zeros(b), tset.residuals[rays].reshape(-1)])
    parts = {
        "surf": loss_surface(f_surf),
        "sign": loss_sign(v, res, model.alpha),
        "mono": loss_mono(f_samp.reshape(b, m), model.alpha),
        "eik": loss_eikonal(tape.point_grads) if n_grad else None,
    }
    return BatchLoss(total_loss(parts, weights), parts, tape, b)


def _touched_rows(tape: EvalTape) -> list[np.ndarray]:
    rows = []
    for lr in tape.record.levels:
        idx = lr.index[lr.index >= 0]
        rows.append(np.unique(idx))
    return rows


def write_history(path, history: list[dict], config_hash: str | None = None) -> None:
    """Loss CSV; the optional config hash goes on a leading ``#`` line."""
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash {config_hash}\n")
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in HISTORY_FIELDS})


def train(model: FieldModel, tset: TrainingSet, cfg: TrainConfig = TrainConfig(),
          opt_state: OptState | None = None, on_checkpoint=None) -> tuple[FieldModel, list[dict]]:
    """Optimize ``model`` in place; returns it with the per-iteration loss history.

    Pass ``opt_state`` to keep (or resume) the optimizer moments across calls.
    ``on_checkpoint(iteration, model, opt_state)`` runs every
    ``cfg.checkpoint_every`` iterations (when > 0).
    """
    params = model.parameters()
    n_dec = len(model.decoder.arrays())
    state = opt_state or OptState.for_params(params, cfg.opt)
    history = []
    t0 = time.perf_counter()
    start = state.step
    for it in range(start + 1, start + cfg.iterations + 1):
        # keyed on the iteration so a resumed run draws the same batches
        rays = np.random.default_rng([cfg.seed, it]).integers(0, tset.num_rays, size=cfg.batch_rays)
        try:
            bl = batch_loss(model, tset, rays, cfg.weights)
        except NonFiniteError as e:
            raise NonFiniteError(str(e), it) from e
        total = bl.total
        if not np.isfinite(total.data):
            raise NonFiniteError("non-finite loss", it)
        total.backward()
        grads = [t.grad if t.grad is not None else np.zeros(t.shape) for t in bl.tape.params + bl.tape.features]
        rows = [None] * n_dec + _touched_rows(bl.tape)
        lr = adamw_step(state, params, grads, it, rows)
        parts = {k: (float(v.data) if v is not None else float("nan")) for k, v in bl.parts.items()}
        history.append({"iteration": it, "L_surf": parts["surf"], "L_sign": parts["sign"],
                        "L_mono": parts["mono"], "L_eik": parts["eik"], "total": float(total.data), "lr": lr})
        if cfg.log_every and it % cfg.log_every == 0:
            log.info("it %d total %.5f surf %.5f sign %.5f mono %.5f eik %.5f (%.1fs)", it, history[-1]["total"],
                     parts["surf"], parts["sign"], parts["mono"], parts["eik"], time.perf_counter() - t0)
        if cfg.checkpoint_every and it % cfg.checkpoint_every == 0 and on_checkpoint is not None:
            on_checkpoint(it, model, state)
    return model, history


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        return [{k: (int(v) if k == "iteration" else float(v)) for k, v in r.items()} for r in rows]


def monotone_fraction(model: FieldModel, tset: TrainingSet, chunk_rays: int = 4096) -> float:
    """Share of rays whose sampled values never increase with ``t``."""
    ok = 0
    for s in range(0, tset.num_rays, chunk_rays):
        rays = np.arange(s, min(s + chunk_rays, tset.num_rays))
        v = model(tset.points(rays).reshape(-1, 3)).reshape(len(rays), tset.per_ray)
        ok += int(np.count_nonzero(np.all(np.diff(v, axis=1) <= 0, axis=1)))
    return ok / tset.num_rays
