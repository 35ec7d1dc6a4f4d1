"""Run configuration: a JSON document validated before any phase starts.

Example (every section and key is optional; unknown keys are rejected)::

    {
      "seed": 0,
      "data": {"task": "keyword-topic", "train_size": 10000, "dev_size": 1000,
               "test_size": 2000, "length": 32, "num_classes": 4},
      "encoder": {"num_layers": 4, "hidden_dim": 32, "num_heads": 2,
                  "ffn_dim": 64, "max_len": 32, "cp_dim": 16},
      "finetune": {"epochs": 3, "lr": 0.001, "batch_size": 32, "top_k": 3},
      "adaptive": {"epochs": 4, "gamma": 0.1, "phi": 0.01, "threshold_lr": 0.02},
      "schedule": {"lambda0": 10, "growth": 10, "beta": 0.01},
      "init": {"eta": 0.5, "theta": 1.0},
      "eval": {"include_cp_flops": true}
    }
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .data import TASKS
from .errors import ConfigError
from .training import SoftRemovalSchedule, TrainingHyperparams

PHASES = ("generate-data", "finetune", "extract-saliency", "train-adaptive", "infer", "evaluate", "flops-report")


@dataclass
class DataConfig:
    task: str = "keyword-topic"
    train_size: int = 10000
    dev_size: int = 1000
    test_size: int = 2000
    length: int = 32
    num_classes: int = 4
    train: str | None = None
    dev: str | None = None
    test: str | None = None
    rationale_only: bool = False

    def validate(self):
        if self.task not in TASKS and not (self.train and self.dev and self.test):
            raise ConfigError(f"data.task must be one of {TASKS} unless train/dev/test paths are given")
        for name in ("train_size", "dev_size", "test_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"data.{name} must be >= 1")
        if self.length < 2:
            raise ConfigError("data.length must be >= 2")


@dataclass
class EncoderSection:
    num_layers: int = 4
    hidden_dim: int = 32
    num_heads: int = 2
    ffn_dim: int = 64
    max_len: int = 32
    activation: str = "gelu"
    cp_dim: int | None = None


@dataclass
class FinetuneSection:
    epochs: int = 3
    lr: float = 1e-3
    batch_size: int = 32
    top_k: int = 3
    weight_decay: float = 0.01

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1 or self.top_k < 1 or self.lr <= 0:
            raise ConfigError("finetune: epochs, batch_size, top_k must be >= 1 and lr > 0")


@dataclass
class InitSection:
    eta: float = 0.5
    theta: float = 1.0

    def validate(self):
        if not 0 < self.eta < 1:
            raise ConfigError(f"init.eta must satisfy 0 < eta < 1, got {self.eta}")
        if self.theta < 1:
            raise ConfigError(f"init.theta must be >= 1 (theta amplifies [CLS]), got {self.theta}")


@dataclass
class EvalSection:
    include_cp_flops: bool = True
    max_examples: int | None = None


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    adaptive: TrainingHyperparams = field(default_factory=TrainingHyperparams)
    schedule: SoftRemovalSchedule = field(default_factory=SoftRemovalSchedule)
    init: InitSection = field(default_factory=InitSection)
    eval: EvalSection = field(default_factory=EvalSection)
    phases: list = field(default_factory=lambda: list(PHASES))

    def validate(self):
        self.data.validate()
        self.finetune.validate()
        self.adaptive.validate()
        self.schedule.validate()
        self.init.validate()
        if self.encoder.max_len < self.data.length:
            raise ConfigError(f"encoder.max_len ({self.encoder.max_len}) < data.length ({self.data.length})")
        for p in self.phases:
            if p not in PHASES:
                raise ConfigError(f"unknown phase {p!r}; choose from {PHASES}")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def digest(self, *sections):
        d = self.to_dict()
        if sections:
            d = {k: d[k] for k in sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


_SECTIONS = {
    "data": DataConfig,
    "encoder": EncoderSection,
    "finetune": FinetuneSection,
    "adaptive": TrainingHyperparams,
    "schedule": SoftRemovalSchedule,
    "init": InitSection,
    "eval": EvalSection,
}


def _build(cls, values, where):
    if not isinstance(values, dict):
        raise ConfigError(f"{where} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(d):
    if not isinstance(d, dict):
        raise ConfigError("configuration must be a JSON object")
    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(d) - top
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    kwargs = {}
    for key, value in d.items():
        if key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value, key)
        else:
            kwargs[key] = value
    cfg = RunConfig(**kwargs)
    # sections that validate lazily
    cfg.validate()
    return cfg


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(d)
