"""Run configuration: every tunable of the pipeline in one JSON document.

Schema (all sections and keys optional; unknown keys are rejected)::

    {
      "seed": 0, "threads": 1,
      "preprocess": {"min_range", "max_range", "voxel", "knn", "std_mult"},
      "sample":     {"m_free", "m_surf", "m_occ", "eps", "gamma", "theta"},
      "octree":     {"leaf_voxel", "num_levels", "dim"},
      "posenc":     {"num_frequencies", "include_raw"},
      "decoder":    {"hidden", "num_layers", "output_bias"},
      "alpha": 100.0,
      "train":      {"batch_rays", "iterations", "checkpoint_every", "log_every",
                     "weights": {"lambda_eik", "lambda_sign", "lambda_mono", "lambda_surf"},
                     "opt": {"lr", "beta1", "beta2", "eps", "weight_decay", "milestones", "decay"}},
      "mesh":       {"spacing", "masked", "bounds_pad"},
      "metrics":    {"resolution", "truncation", "threshold"}
    }

``seed`` feeds every stochastic stage (sampling, decoder init, batch order,
metric sampling), so the per-stage seed keys are not part of the schema.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

from .decoder import DecoderConfig, PosEncConfig
from .errors import ConfigError, IngestIOError
from .evalmetrics import MetricParams
from .ingest import PreprocessConfig
from .sampler import SampleConfig
from .training import TrainConfig

# keys driven by the top-level seed or by CLI paths
_DERIVED = {
    SampleConfig: {"rng_seed"},
    DecoderConfig: {"init_seed"},
    TrainConfig: {"seed", "checkpoint_dir"},
    MetricParams: {"seed"},
}


@dataclass(frozen=True)
class OctreeConfig:
    leaf_voxel: float = 0.2
    num_levels: int = 3
    dim: int = 8

    def __post_init__(self):
        if not self.leaf_voxel > 0 or self.num_levels < 1 or self.dim < 1:
            raise ConfigError("octree needs leaf_voxel > 0, num_levels >= 1, dim >= 1")


@dataclass(frozen=True)
class MeshConfig:
    spacing: float = 0.10
    masked: bool = True
    bounds_pad: float = 0.2

    def __post_init__(self):
        if not self.spacing > 0 or self.bounds_pad < 0:
            raise ConfigError("mesh spacing must be positive and bounds_pad >= 0")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int = 1
    preprocess: PreprocessConfig = PreprocessConfig()
    sample: SampleConfig = SampleConfig()
    octree: OctreeConfig = OctreeConfig()
    posenc: PosEncConfig = PosEncConfig()
    decoder: DecoderConfig = DecoderConfig()
    alpha: float = 100.0
    train: TrainConfig = TrainConfig()
    mesh: MeshConfig = MeshConfig()
    metrics: MetricParams = MetricParams()

    def __post_init__(self):
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        # push the seed into every stage
        object.__setattr__(self, "sample", replace(self.sample, rng_seed=self.seed))
        object.__setattr__(self, "decoder", replace(self.decoder, init_seed=self.seed))
        object.__setattr__(self, "train", replace(self.train, seed=self.seed))
        object.__setattr__(self, "metrics", replace(self.metrics, seed=self.seed))

    def to_dict(self) -> dict:
        return _to_dict(self)

    def config_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _from_dict(cls, d, "config")

    def override(self, **kw) -> "RunConfig":
        """Copy with top-level keys replaced; ``None`` values are ignored."""
        return replace(self, **{k: v for k, v in kw.items() if v is not None})


def _to_dict(obj) -> dict:
    skip = _DERIVED.get(type(obj), set())
    out = {}
    for f in dataclasses.fields(obj):
        if f.name in skip:
            continue
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            v = _to_dict(v)
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def _from_dict(cls, d, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    default = cls()
    allowed = {f.name for f in dataclasses.fields(cls)} - _DERIVED.get(cls, set())
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kw = {}
    for name, value in d.items():
        cur = getattr(default, name)
        if dataclasses.is_dataclass(cur):
            kw[name] = _from_dict(type(cur), value, f"{where}.{name}")
        elif isinstance(cur, tuple):
            kw[name] = tuple(value)
        elif isinstance(cur, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}.{name}: expected true/false")
            kw[name] = value
        elif isinstance(cur, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{where}.{name}: expected an integer")
            kw[name] = value
        elif isinstance(cur, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}.{name}: expected a number")
            kw[name] = float(value)
        else:
            kw[name] = value
    try:
        return cls(**kw)
    except ConfigError as e:
        raise ConfigError(f"{where}: {e}") from e


def load_config(path) -> RunConfig:
    try:
        d = json.loads(Path(path).read_text())
    except OSError as e:
        raise IngestIOError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return RunConfig.from_dict(d)


def weights_context(cfg: RunConfig) -> dict:
    w = cfg.train.weights
    return {"config_hash": cfg.config_hash(), "lambda_eik": w.lambda_eik, "lambda_sign": w.lambda_sign,
            "lambda_mono": w.lambda_mono, "lambda_surf": w.lambda_surf, "alpha": cfg.alpha}
