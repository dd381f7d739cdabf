"""Dataclass configs for data generation, model, training and evaluation.

Everything the generator or trainer might vary lives here with its default,
so a run is fully described by (config, seed). Configs serialize to plain
dicts for hashing and for the JSON run-config file the CLI reads.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

VARIANTS = ("Baseline", "Proposed", "TaskArch", "JointLoss", "AllFeats")


class ConfigError(ValueError):
    """Bad or unknown config keys/values."""


@dataclass
class DataConfig:
    n_users: int = 2000
    n_items: int = 5000
    k_topics: int = 8
    n_tasks: int = 3
    n_days: int = 14
    zipf_s: float = 1.1
    exposure_tilt: float = 0.7  # exposure ∝ popularity^tilt
    mean_activity: float = 10.0  # expected impressions per user per day
    casual_fraction: float = 0.06  # share of users with drastically lower activity
    casual_activity_scale: float = 0.01
    new_items_per_day: int = 50
    conformity_beta: tuple = (2.0, 5.0)  # Beta(a, b) prior on user conformity
    # per-task logit coefficients: conformity gain, relevance gain, intercept
    task_alpha: tuple = (1.6, 1.2, 0.8)
    task_beta: tuple = (2.2, 2.6, 1.8)
    task_gamma: tuple = (-2.2, -2.6, -3.0)
    n_age_buckets: int = 6
    n_content_types: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.n_users < 1 or self.n_items < 1:
            raise ConfigError("n_users and n_items must be >= 1")
        if self.k_topics < 2:
            raise ConfigError("k_topics must be >= 2")
        if self.n_days < 2:
            raise ConfigError("need at least one train day and one test day")
        for name in ("task_alpha", "task_beta", "task_gamma"):
            if len(getattr(self, name)) != self.n_tasks:
                raise ConfigError(f"{name} must have one entry per task")
        if not 0.0 <= self.casual_fraction < 1.0:
            raise ConfigError("casual_fraction must be in [0, 1)")
        if self.casual_activity_scale <= 0.0:
            raise ConfigError("casual_activity_scale must be positive")


@dataclass
class ModelConfig:
    variant: str = "Proposed"
    shared_widths: tuple = (128, 64)
    head_widths: tuple = (32, 1)
    tower_width: int = 32
    tower_blocks: int = 2
    embed_dim: int = 8  # per categorical feature
    causal_embed_dim: int = 16  # width of each causal embedding
    task_weights: tuple = (1.0, 1.0, 1.0)
    conformity_weight: float = 0.3
    relevance_weight: float = 0.3
    mixture_weight: float = 0.1  # diagnostic mixture head, own loss term
    thresh: float = 0.6
    squared_causal_loss: bool = False
    joint_label_mix: float = 0.5  # JointLoss only: causal vs task label blend
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(
                f"unknown variant {self.variant!r}; choose one of {', '.join(VARIANTS)}"
            )
        if self.head_widths[-1] != 1:
            raise ConfigError("task heads must end in a single output")
        if any(w < 0 for w in self.task_weights) or not any(self.task_weights):
            raise ConfigError("task_weights must be >= 0 with at least one > 0")
        if self.conformity_weight < 0 or self.relevance_weight < 0:
            raise ConfigError("loss weights must be >= 0")


@dataclass
class TrainConfig:
    lr: float = 3e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 128
    shuffle_seed: int = 0


@dataclass
class EvalConfig:
    combine_weights: tuple = ()  # empty → all-ones over tasks
    tail_quantiles: tuple = (0.5, 0.75)
    age_buckets: tuple = (0, 1, 3, 10)  # left edges; last bucket is open
    replay_users: int = 300
    replay_candidates: int = 100
    replay_k: int = 10
    probe_samples: int = 10000


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seeds: tuple = (0, 1, 2, 3, 4)


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def to_dict(cfg) -> dict:
    return _to_jsonable(cfg)


def _from_dict(cls, data: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        v = data[f.name]
        if dataclasses.is_dataclass(f.default_factory() if f.default_factory is not dataclasses.MISSING else None):
            v = _from_dict(type(f.default_factory()), v)
        elif isinstance(v, list):
            v = tuple(v)
        kwargs[f.name] = v
    return cls(**kwargs)


def run_config_from_dict(data: dict) -> RunConfig:
    return _from_dict(RunConfig, data)


def load_run_config(path) -> RunConfig:
    with open(path) as fh:
        return run_config_from_dict(json.load(fh))


def config_hash(cfg) -> str:
    canon = json.dumps(to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]
