"""Day-recurrent training: warm-started weights + optimizer state, prequential
holdout evaluation, and bit-exact checkpointing.

Each simulated day is one training epoch over seeded mini-batches. Before a
day is ever trained on, it is scored as the holdout for the previous day, so
no metric ever sees data that already produced a gradient.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import config as C
from . import losses as L
from . import serialize as S
from .autodiff import Tape
from .labels import causal_labels
from .model import Cam2Model, check_decoupling
from .schema import FeatureSpec, Schema, validate_schema


class SequencingError(ValueError):
    """Days must be trained strictly in order, each exactly once."""


def day_data_from_log(log, schema_hash: str) -> dict:
    """In-memory equivalent of serialize.read_day_file for a DayLog."""
    return {
        "schema_hash": schema_hash,
        "day": log.day,
        "user_ids": log.user_ids,
        "item_ids": log.item_ids,
        "features": log.features,
        "x": log.x_scalar,
        "labels": log.labels,
        "conformity_component": log.conformity_component,
        "relevance_component": log.relevance_component,
    }


@dataclass
class MetricsRow:
    variant: str
    seed: int
    day: int  # holdout day the NE numbers refer to
    ne_per_task: tuple
    ne_aggregated: float
    train_losses: L.LossReport | None = None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d


class TrainState:
    """Model + optimizer moments + day counter; the warm-start unit."""

    def __init__(self, model: Cam2Model, train_cfg: C.TrainConfig):
        self.model = model
        self.train_cfg = train_cfg
        self.optimizer = model.make_optimizer(train_cfg.lr, train_cfg.betas, train_cfg.eps)
        self.last_day = -1
        self.config_hash = C.config_hash(
            {"model": C.to_dict(model.config), "train": C.to_dict(train_cfg)}
        )


def _causal_targets(model: Cam2Model, day_data: dict):
    if model.config.variant == "Baseline":
        return None
    flags = model.topic_flags(day_data["features"])
    return causal_labels(day_data["labels"][:, 0], day_data["x"],
                         model.config.thresh, flags)


def train_day(state: TrainState, day_data: dict) -> L.LossReport:
    """One seeded-shuffle epoch over a day's events; mutates state in place."""
    day = day_data["day"]
    if day is not None and day != state.last_day + 1:
        raise SequencingError(
            f"got day {day} but last completed day is {state.last_day}")
    n = day_data["features"].shape[0]
    if n == 0:
        state.last_day += 1
        return L.LossReport((), 0.0, 0.0, 0.0, 0)

    state.model.check_schema(day_data["schema_hash"])
    rng = np.random.default_rng([state.train_cfg.shuffle_seed, day])
    perm = rng.permutation(n)
    bs = state.train_cfg.batch_size

    sums = None
    for lo in range(0, n, bs):
        idx = perm[lo : lo + bs]
        batch = {
            "features": day_data["features"][idx],
            "labels": day_data["labels"][idx],
            "x": day_data["x"][idx],
        }
        causal = _causal_targets(state.model, batch)
        state.optimizer.zero_grads()
        tape = Tape()
        objective, _, report = state.model.training_objective(
            tape, batch["features"], batch["labels"], causal)
        tape.backward(objective)
        state.optimizer.step()

        w = len(idx)
        vals = np.array([*report.task, report.conformity, report.relevance,
                         report.total])
        sums = (sums[0] + w * vals, sums[1] + w) if sums else (w * vals, w)

    mean = sums[0] / sums[1]
    n_tasks = len(state.model.config.task_weights)
    state.last_day += 1
    return L.LossReport(tuple(mean[:n_tasks]), mean[n_tasks], mean[n_tasks + 1],
                        mean[n_tasks + 2], sums[1])


def evaluate_ne(model: Cam2Model, day_data: dict) -> tuple:
    """(per-task NE tuple, aggregated NE) on a holdout day."""
    preds = model.predict(day_data["features"], day_data["schema_hash"])
    ne = tuple(
        L.normalized_cross_entropy(preds[:, t], day_data["labels"][:, t])
        for t in range(preds.shape[1])
    )
    return ne, float(np.mean(ne))


def run_experiment(model_cfg: C.ModelConfig, train_cfg: C.TrainConfig,
                   days: list, schema: Schema, seed: int | None = None,
                   audit_first_batch: bool = True):
    """Prequential loop: evaluate day d+1, after having trained through d.

    Returns (final TrainState, list of MetricsRow). `days` is a list of
    day-data dicts (see serialize.read_day_file) in chronological order.
    """
    if len(days) < 2:
        raise SequencingError("need at least one train day and one holdout day")
    cfg = model_cfg if seed is None else dataclasses.replace(model_cfg, seed=seed)
    model = Cam2Model(cfg, schema)
    state = TrainState(model, train_cfg)

    if audit_first_batch:
        first = days[0]
        n0 = min(64, first["features"].shape[0])
        batch = {"features": first["features"][:n0], "labels": first["labels"][:n0],
                 "x": first["x"][:n0]}
        check_decoupling(model, batch["features"], batch["labels"],
                         _causal_targets(model, batch))

    rows = []
    for d in range(len(days) - 1):
        report = train_day(state, days[d])
        ne, agg = evaluate_ne(model, days[d + 1])
        rows.append(MetricsRow(cfg.variant, cfg.seed, days[d + 1]["day"], ne, agg,
                               report))
    return state, rows


# -- checkpoints --------------------------------------------------------


def save_checkpoint(state: TrainState, path):
    payload = {
        "config_hash": state.config_hash,
        "model_config": C.to_dict(state.model.config),
        "train_config": C.to_dict(state.train_cfg),
        "schema": [list(dataclasses.astuple(s)) for s in state.model.schema.specs],
        "schema_hash": state.model.schema_hash,
        "last_day": state.last_day,
        "params": {p.name: S.pack_array(p.value) for p in state.model.parameters()},
        "adam": {
            name: {"m": S.pack_array(st["m"]), "v": S.pack_array(st["v"]), "t": st["t"]}
            for name, st in state.optimizer.state.items()
        },
    }
    S.save_container(path, payload)


def load_checkpoint(path, expect_config_hash: str | None = None) -> TrainState:
    payload = S.load_container(path)
    if expect_config_hash is not None and payload["config_hash"] != expect_config_hash:
        raise S.CheckpointError(
            f"checkpoint was trained under config {payload['config_hash']}, "
            f"not {expect_config_hash}")
    schema = validate_schema([FeatureSpec(*s) for s in payload["schema"]])
    model_cfg = C._from_dict(C.ModelConfig, payload["model_config"])
    train_cfg = C._from_dict(C.TrainConfig, payload["train_config"])
    model = Cam2Model(model_cfg, schema)
    for p in model.parameters():
        if p.name not in payload["params"]:
            raise S.CheckpointError(f"checkpoint missing parameter {p.name}")
        arr = S.unpack_array(payload["params"][p.name])
        if arr.shape != p.value.shape:
            raise S.CheckpointError(f"parameter {p.name} shape mismatch")
        p.value = arr.astype(np.float64)
        p.zero_grad()
    state = TrainState(model, train_cfg)
    state.optimizer.load_state_dict({
        name: {"m": S.unpack_array(st["m"]), "v": S.unpack_array(st["v"]), "t": st["t"]}
        for name, st in payload["adam"].items()
    })
    state.last_day = payload["last_day"]
    return state


def resume_experiment(state: TrainState, days: list):
    """Continue a checkpointed run over the remaining days (prequential)."""
    rows = []
    for d in range(len(days) - 1):
        if days[d]["day"] is not None and days[d]["day"] <= state.last_day:
            continue
        report = train_day(state, days[d])
        ne, agg = evaluate_ne(state.model, days[d + 1])
        rows.append(MetricsRow(state.model.config.variant, state.model.config.seed,
                               days[d + 1]["day"], ne, agg, report))
    return state, rows
