"""Nesterov SGD, step-decay schedule, training loop and checkpoints.

The update for every parameter tensor ``theta`` with gradient ``g``::

    g' = g + weight_decay * theta
    v  = momentum * v + g'
    theta = theta - lr * (g' + momentum * v)

Checkpoints are JSON documents (floats written with ``repr`` so they
round-trip bit-exactly)::

    {"format": "gren-checkpoint", "version": 1,
     "epoch": <completed epochs>, "step": <optimizer steps taken>,
     "seed": <train seed>, "config": {...TrainConfig...},
     "params":   [{"name": str, "shape": [int], "data": [float]}, ...],
     "velocity": [{"name": str, "shape": [int], "data": [float]}, ...]}
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from gren import diffcore as dc
from gren import model
from gren.diffcore import Tensor
from gren.objective import ObjectiveConfig, total_objective
from gren.synthgen import Sample, make_batches, region_hashes

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "gren-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0001
    epochs: int = 9
    decay_every: int = 4
    decay_factor: float = 0.1
    batch_size: int = 4
    seed: int = 0
    upsample: bool = False
    grad_clip: float | None = 100.0
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.epochs < 1 or self.decay_every < 1:
            raise ValueError("epochs and decay_every must be at least 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive or None")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "objective" in d and isinstance(d["objective"], dict):
            d["objective"] = ObjectiveConfig(**d["objective"])
        return cls(**d)


@dataclass
class TrainState:
    params: model.Params
    velocity: dict[str, np.ndarray]
    epoch: int = 0
    step: int = 0
    seed: int = 0

    @classmethod
    def fresh(cls, config: TrainConfig, num_classes: int) -> "TrainState":
        params = model.init_params(config.seed, num_classes)
        velocity = {k: np.zeros(v.shape) for k, v in params.items()}
        return cls(params, velocity, 0, 0, config.seed)


def lr_at(epoch: int, config: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return config.lr0 * config.decay_factor ** (epoch // config.decay_every)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


def nesterov_step(state: TrainState, grads: dict[str, np.ndarray], lr: float, config: TrainConfig) -> TrainState:
    for name, p in state.params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        g = g + config.weight_decay * p.data
        v = config.momentum * state.velocity[name] + g
        state.velocity[name] = v
        p.data = p.data - lr * (g + config.momentum * v)
    state.step += 1
    return state


def train(
    samples: Sequence[Sample],
    config: TrainConfig,
    state: TrainState | None = None,
    checkpoint_dir: str | os.PathLike | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> tuple[TrainState, list[dict]]:
    """Run (or resume) training; returns the final state and per-step records."""
    if not samples:
        raise ValueError("training set is empty")
    num_classes = len(samples[0].labels)
    if state is None:
        state = TrainState.fresh(config, num_classes)
    hashes = [region_hashes(s) for s in samples]
    records: list[dict] = []
    names = list(state.params)

    for epoch in range(state.epoch, config.epochs):
        lr = lr_at(epoch, config)
        for batch in make_batches(samples, config.batch_size, config.seed + epoch, hashes):
            dc.zero_grad(state.params.values())
            losses = total_objective(batch, state.params, config.objective, upsample=config.upsample)
            values = losses.values()
            if not all(math.isfinite(v) for v in values.values()):
                raise TrainingDiverged(f"non-finite loss at step {state.step}: {values}")
            dc.backward(losses.Q)
            grads = {n: state.params[n].grad if state.params[n].grad is not None
                     else np.zeros(state.params[n].shape) for n in names}
            clip_grad_norm(grads, config.grad_clip)
            record = {"step": state.step, "epoch": epoch, "lr": lr, **values}
            nesterov_step(state, grads, lr, config)
            records.append(record)
            if on_step is not None:
                on_step(record)
        state.epoch = epoch + 1
        log.info("epoch %d done, last Q=%.4f", epoch + 1, records[-1]["Q"] if records else float("nan"))
        if checkpoint_dir is not None:
            save_checkpoint(state, Path(checkpoint_dir) / f"epoch_{state.epoch:02d}.json", config)
    dc.zero_grad(state.params.values())
    return state, records


# ---------------------------------------------------------------- checkpoints


def _tensors_to_json(arrays: dict[str, np.ndarray]) -> list[dict]:
    return [{"name": k, "shape": list(v.shape), "data": v.reshape(-1).tolist()} for k, v in arrays.items()]


def _tensors_from_json(items: list[dict]) -> dict[str, np.ndarray]:
    out = {}
    for item in items:
        data = np.asarray(item["data"], dtype=np.float64)
        shape = tuple(item["shape"])
        if data.size != int(np.prod(shape)):
            raise CheckpointError(f"corrupt checkpoint: tensor {item['name']} has wrong size")
        out[item["name"]] = data.reshape(shape)
    return out


def save_checkpoint(state: TrainState, path: str | os.PathLike, config: TrainConfig | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "epoch": state.epoch,
        "step": state.step,
        "seed": state.seed,
        "config": config.to_dict() if config is not None else None,
        "params": _tensors_to_json({k: v.data for k, v in state.params.items()}),
        "velocity": _tensors_to_json(state.velocity),
    }
    path.write_text(json.dumps(doc))
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[TrainState, TrainConfig | None]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"corrupt checkpoint {path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has version {doc.get('version')!r}, expected {CHECKPOINT_VERSION}"
        )
    try:
        params = {k: Tensor(v, requires_grad=True) for k, v in _tensors_from_json(doc["params"]).items()}
        velocity = _tensors_from_json(doc["velocity"])
        config = TrainConfig.from_dict(doc["config"]) if doc.get("config") else None
        state = TrainState(params, velocity, int(doc["epoch"]), int(doc["step"]), int(doc["seed"]))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if set(velocity) != set(params) or any(velocity[k].shape != params[k].shape for k in params):
        raise CheckpointError(f"corrupt checkpoint {path}: velocity does not mirror parameters")
    return state, config
