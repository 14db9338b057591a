"""Declarative experiment configs.

A config is a YAML document with nested blocks. Loading fills every default
explicitly; ``resolved_dict`` is written next to each run and can be loaded
back to reproduce it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .nn import NetworkSpec
from .optim import DEFAULT_LR, OptimizerConfig, TrainConfig
from .volume import MCConfig

KINDS = ("train", "volume", "poison_scan", "data_scan", "grok", "oracle", "fit", "slice", "imbalance")
SOURCES = ("swiss_roll", "modulo", "idx")

# the paper's measurement protocol
DEFAULT_K = 500
DEFAULT_THRESHOLD = 0.1
DEFAULT_THRESHOLD_MSE = 0.01
DEFAULT_SCAN_STEPS = 100


class ConfigError(ValueError):
    """A config field is missing, unknown or invalid."""


@dataclass
class DatasetBlock:
    source: str = "swiss_roll"
    n: int = 2000
    noise: float = 0.5
    seed: int = 0
    p: int = 97
    images: str | None = None
    labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_size: int | None = None
    train_fraction: float | None = None
    test_size: int | None = None
    sizes: list = field(default_factory=list)
    fractions: list = field(default_factory=list)
    poison_counts: list = field(default_factory=list)
    class_proportions: dict | None = None


@dataclass
class ModelBlock:
    hidden_dims: list = field(default_factory=lambda: [32] * 5)
    activation: str = "relu"
    loss_kind: str | None = None


@dataclass
class OptimizerBlock:
    kind: str = "adamw"
    learning_rate: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    rho: float = 0.05


@dataclass
class TrainBlock:
    epochs: int = 2000
    batch_size: int = 32
    target_loss: float | None = None
    checkpoint_epochs: list = field(default_factory=list)


@dataclass
class MCBlock:
    K: int = DEFAULT_K
    threshold: float | None = None
    c_max: float = 50.0
    scan_steps: int = DEFAULT_SCAN_STEPS
    bisect_iters: int = 20
    filter_normalize: bool = True
    normalize_directions: bool = True
    workers: int = 1


@dataclass
class SeedsBlock:
    model_seeds: list = field(default_factory=lambda: [0])
    split_seeds: list = field(default_factory=lambda: [0])
    mc_seed: int = 0
    # "product": every model seed with every split seed; "zip": pairwise
    mode: str = "product"

    def grid(self) -> list[tuple[int, int]]:
        if self.mode == "zip":
            return list(zip(self.model_seeds, self.split_seeds))
        return [(m, s) for m in self.model_seeds for s in self.split_seeds]


@dataclass
class OracleBlock:
    s: float = 0.2
    b: list = field(default_factory=lambda: [1.0, 3.0])
    resolution: int = 2000
    c_max: float = 4.0


@dataclass
class FitBlock:
    result: str | None = None
    points: list = field(default_factory=list)
    n_params: int | None = None
    per_seed: bool = False


@dataclass
class SliceBlock:
    half_width: float = 1.0
    steps: int = 10
    # "random": two filter-normalized directions; "minima": plane through three trained minima
    mode: str = "random"


@dataclass
class ExperimentConfig:
    kind: str
    output_dir: str = "runs"
    dataset: DatasetBlock = field(default_factory=DatasetBlock)
    model: ModelBlock = field(default_factory=ModelBlock)
    optimizer: OptimizerBlock = field(default_factory=OptimizerBlock)
    train: TrainBlock = field(default_factory=TrainBlock)
    mc: MCBlock = field(default_factory=MCBlock)
    seeds: SeedsBlock = field(default_factory=SeedsBlock)
    oracle: OracleBlock = field(default_factory=OracleBlock)
    fit: FitBlock = field(default_factory=FitBlock)
    slice: SliceBlock = field(default_factory=SliceBlock)

    # --- derived objects -------------------------------------------------

    def loss_kind(self) -> str:
        if self.model.loss_kind:
            return self.model.loss_kind
        return "mse_onehot" if self.dataset.source == "modulo" else "cross_entropy"

    def network_spec(self, input_dim: int, output_dim: int) -> NetworkSpec:
        return NetworkSpec(input_dim, tuple(self.model.hidden_dims), output_dim,
                           self.model.activation, self.loss_kind())

    def optimizer_config(self) -> OptimizerConfig:
        o = self.optimizer
        return OptimizerConfig(o.kind, o.learning_rate, o.beta1, o.beta2, o.epsilon, o.weight_decay, o.rho)

    def train_config(self, shuffle_seed: int, epochs: int | None = None) -> TrainConfig:
        t = self.train
        return TrainConfig(t.epochs if epochs is None else epochs, t.batch_size, shuffle_seed,
                           tuple(t.checkpoint_epochs), t.target_loss)

    def mc_config(self, threshold: float | None = None) -> MCConfig:
        m = self.mc
        return MCConfig(m.K, threshold if threshold is not None else m.threshold, m.c_max, m.scan_steps,
                        m.bisect_iters, self.seeds.mc_seed, m.filter_normalize, m.normalize_directions, m.workers)

    # --- serialization ---------------------------------------------------

    def resolved_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        d = self.resolved_dict()
        d.pop("output_dir")
        d["mc"].pop("workers")  # parallelism never changes results
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


_BLOCKS = {
    "dataset": DatasetBlock,
    "model": ModelBlock,
    "optimizer": OptimizerBlock,
    "train": TrainBlock,
    "mc": MCBlock,
    "seeds": SeedsBlock,
    "oracle": OracleBlock,
    "fit": FitBlock,
    "slice": SliceBlock,
}


def _build_block(cls, data: Any, where: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(unknown)}")
    return cls(**data)


def _set_path(d: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
        if not isinstance(d, dict):
            raise ConfigError(f"override {dotted}: {k} is not a block")
    d[keys[-1]] = value


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like block.field=value")
    key, raw = item.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def from_dict(data: dict, overrides: list[str] | None = None) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    data = json.loads(json.dumps(data))
    for item in overrides or []:
        key, value = parse_override(item)
        _set_path(data, key, value)
    unknown = sorted(set(data) - {"kind", "output_dir", *_BLOCKS})
    if unknown:
        raise ConfigError(f"unknown top-level field(s) {', '.join(unknown)}")
    if "kind" not in data:
        raise ConfigError("kind: required")
    kw = {name: _build_block(cls, data.get(name), name) for name, cls in _BLOCKS.items()}
    cfg = ExperimentConfig(kind=data["kind"], output_dir=str(data.get("output_dir", "runs")), **kw)
    return resolve(cfg)


def resolve(cfg: ExperimentConfig) -> ExperimentConfig:
    """Fill context-dependent defaults and validate every field."""
    if cfg.kind not in KINDS:
        raise ConfigError(f"kind: must be one of {', '.join(KINDS)}")
    ds = cfg.dataset
    if ds.source not in SOURCES:
        raise ConfigError(f"dataset.source: must be one of {', '.join(SOURCES)}")
    if ds.source == "idx" and cfg.kind not in ("oracle", "fit") and not (ds.images and ds.labels):
        raise ConfigError("dataset.images and dataset.labels: required for idx source")
    if ds.train_size is not None and ds.train_fraction is not None:
        raise ConfigError("dataset: give train_size or train_fraction, not both")
    if cfg.model.loss_kind is None:
        cfg.model.loss_kind = cfg.loss_kind()
    if cfg.mc.threshold is None:
        cfg.mc.threshold = DEFAULT_THRESHOLD_MSE if cfg.model.loss_kind == "mse_onehot" else DEFAULT_THRESHOLD
    if cfg.optimizer.learning_rate is None:
        try:
            cfg.optimizer.learning_rate = DEFAULT_LR[cfg.optimizer.kind]
        except KeyError:
            raise ConfigError(f"optimizer.kind: unknown optimizer {cfg.optimizer.kind!r}") from None
    if not cfg.seeds.model_seeds or not cfg.seeds.split_seeds:
        raise ConfigError("seeds: model_seeds and split_seeds must be non-empty")
    if cfg.seeds.mode not in ("product", "zip"):
        raise ConfigError("seeds.mode: must be product or zip")
    if cfg.seeds.mode == "zip" and len(cfg.seeds.model_seeds) != len(cfg.seeds.split_seeds):
        raise ConfigError("seeds: zip mode needs equally long seed lists")
    if cfg.slice.mode not in ("random", "minima"):
        raise ConfigError("slice.mode: must be random or minima")
    cfg.train.checkpoint_epochs = sorted(int(e) for e in cfg.train.checkpoint_epochs)
    cfg.oracle.b = [float(b) for b in cfg.oracle.b]
    # constructing the runtime objects runs their own validation
    try:
        NetworkSpec(1, tuple(cfg.model.hidden_dims), 1, cfg.model.activation, cfg.model.loss_kind)
        cfg.optimizer_config()
        cfg.train_config(0)
        cfg.mc_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load(path, overrides: list[str] | None = None) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    return from_dict(data or {}, overrides)


def dump(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.resolved_dict(), sort_keys=False)
