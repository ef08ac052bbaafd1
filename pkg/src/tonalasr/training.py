"""Staged transducer training: pretraining, stage 1 (romanised), stage 2 (Han), direct."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .model import COMPONENTS, ConfigError, ModelParams, Utterance, forward_batch, reinit_components, save_checkpoint
from .tokenizer import BpeModel
from .transducer import batch_transducer_loss

logger = logging.getLogger(__name__)

STAGES = ("pretrain", "stage1", "stage2", "direct")
LABEL_FIELDS = ("tailo_text", "han_text")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.0005
    clip_norm: float = 2.0
    accum_steps: int = 4
    epochs_stage1: int = 20
    epochs_stage2: int = 40
    epochs_direct: int = 60
    epochs_pretrain: int = 20
    max_frames: int = 600
    freeze: frozenset = frozenset()
    seed: int = 0
    batch_size: int = 4
    lr_batches: float = 5000.0
    lr_epochs: float = 6.0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9

    def __post_init__(self):
        object.__setattr__(self, "freeze", frozenset(self.freeze))
        unknown = self.freeze - set(COMPONENTS)
        if unknown:
            raise ConfigError(f"cannot freeze unknown components {sorted(unknown)}")
        for name in ("base_lr", "clip_norm", "accum_steps", "max_frames", "batch_size", "lr_batches", "lr_epochs"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    def epochs_for(self, stage: str) -> int:
        return getattr(self, f"epochs_{stage}")


class Dataset:
    """Utterances paired with one transcript field; over-long utterances are dropped."""

    def __init__(self, utterances: Sequence[Utterance], label_field: str, max_frames: int | None = None):
        if label_field not in LABEL_FIELDS:
            raise ConfigError(f"label_field must be one of {LABEL_FIELDS}")
        kept = [u for u in utterances if max_frames is None or u.num_frames <= max_frames]
        self.excluded = len(utterances) - len(kept)
        if self.excluded:
            logger.info("excluded %d utterances longer than %d frames", self.excluded, max_frames)
        if not kept:
            raise ConfigError("dataset is empty")
        self.utterances = kept
        self.label_field = label_field

    def __len__(self) -> int:
        return len(self.utterances)

    def labels(self) -> list[str]:
        return [getattr(u, self.label_field) for u in self.utterances]


@dataclass
class OptimizerState:
    """Adam moments per parameter and the update counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


@dataclass
class StageResult:
    params: ModelParams
    log: list[dict]
    steps: int


def eden_lr(step: int, epoch: int, config: TrainConfig) -> float:
    """base_lr * ((s^2 + B^2) / B^2)^-1/4 * ((e^2 + E^2) / E^2)^-1/4."""
    B, E = config.lr_batches, config.lr_epochs
    return (config.base_lr
            * ((step ** 2 + B ** 2) / B ** 2) ** -0.25
            * ((epoch ** 2 + E ** 2) / E ** 2) ** -0.25)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(math.fsum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float = 2.0) -> dict[str, np.ndarray]:
    """Rescale so the global L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise nx.NumericError("non-finite gradient")
    if norm <= max_norm:
        return grads
    factor = max_norm / norm
    return {k: g * factor for k, g in grads.items()}


def adam_update(params: ModelParams, grads: dict[str, np.ndarray], state: OptimizerState,
                lr: float, config: TrainConfig) -> ModelParams:
    """One bias-corrected Adam step on the parameters present in ``grads``."""
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    updates = {}
    for name, g in grads.items():
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        updates[name] = params[name].data - lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return params.replace(updates)


def batch_loss_and_grads(params: ModelParams, feats: Sequence[np.ndarray], targets: Sequence[Sequence[int]],
                         names: Sequence[str]) -> tuple[float, dict[str, np.ndarray]]:
    """Mean per-utterance NLL of a batch and its gradient for ``names``."""
    if not names:
        flat, segments = forward_batch(params, feats, targets)
        return batch_transducer_loss(flat, segments).item(), {}
    with nx.GradTape() as tape:
        tape.watch(*(params[n] for n in names))
        flat, segments = forward_batch(params, feats, targets)
        loss = batch_transducer_loss(flat, segments)
    grads = tape.backward(loss)
    return loss.item(), {n: grads[params[n]] for n in names}


def train_stage(params: ModelParams, dataset: Dataset, tokenizer: BpeModel, config: TrainConfig,
                stage: str, log_path=None, epochs: int | None = None, on_epoch=None) -> StageResult:
    """Run one stage from fresh optimizer and schedule state.

    Parameters of components in ``config.freeze`` receive no updates.
    ``on_epoch(record, params)`` is called after every epoch if given.
    """
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}")
    if tokenizer.vocab_size != params.config.vocab_size:
        raise ConfigError(f"tokenizer has {tokenizer.vocab_size} tokens, model expects {params.config.vocab_size}")
    epochs = config.epochs_for(stage) if epochs is None else epochs
    names = [n for n in params.names() if n.split(".")[0] not in config.freeze]
    feats = [u.features for u in dataset.utterances]
    targets = [tokenizer.encode(t) for t in dataset.labels()]
    state = OptimizerState()
    log = []
    log_fh = None
    if log_path:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_fh = open(log_path, "a", encoding="utf-8")
    try:
        for epoch in range(epochs):
            start = time.perf_counter()
            order = np.random.default_rng([config.seed, epoch]).permutation(len(dataset))
            batches = [order[i:i + config.batch_size] for i in range(0, len(order), config.batch_size)]
            losses = []
            lr = eden_lr(state.step, epoch, config)
            for w in range(0, len(batches), config.accum_steps):
                window = batches[w:w + config.accum_steps]
                acc: dict[str, np.ndarray] = {}
                for b, idx in enumerate(window):
                    loss, grads = batch_loss_and_grads(params, [feats[i] for i in idx],
                                                       [targets[i] for i in idx], names)
                    if not math.isfinite(loss):
                        raise TrainingError(f"{stage}: non-finite loss at epoch {epoch} batch {w + b}")
                    losses.append(loss)
                    for n, g in grads.items():
                        acc[n] = g.copy() if n not in acc else acc[n] + g
                acc = {n: g / len(window) for n, g in acc.items()}
                acc = clip_gradients(acc, config.clip_norm)
                lr = eden_lr(state.step, epoch, config)
                if names:
                    params = adam_update(params, acc, state, lr, config)
                else:
                    state.step += 1
            record = {"stage": stage, "epoch": epoch, "mean_loss": math.fsum(losses) / len(losses),
                      "lr": lr, "wall_ms": round((time.perf_counter() - start) * 1000, 1)}
            log.append(record)
            logger.info("%s epoch %d loss %.4f lr %.2e", stage, epoch, record["mean_loss"], lr)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if on_epoch:
                on_epoch(record, params)
    finally:
        if log_fh:
            log_fh.close()
    return StageResult(params.with_stage(stage), log, state.step)


def two_stage_train(init_params: ModelParams, utterances: Sequence[Utterance], tokenizer: BpeModel,
                    config: TrainConfig, out_dir=None) -> tuple[ModelParams, list[StageResult]]:
    """Stage 1 on romanised transcripts (with ``config.freeze``), then stage 2 on Han."""
    out = Path(out_dir) if out_dir else None
    log_path = out / "train_log.jsonl" if out else None
    stage1 = train_stage(init_params, Dataset(utterances, "tailo_text", config.max_frames),
                         tokenizer, config, "stage1", log_path)
    if out:
        save_checkpoint(stage1.params, out / "stage1.ckpt", "stage1")
    unfrozen = _unfrozen(config)
    stage2 = train_stage(stage1.params, Dataset(utterances, "han_text", config.max_frames),
                         tokenizer, unfrozen, "stage2", log_path)
    if out:
        save_checkpoint(stage2.params, out / "stage2.ckpt", "stage2")
    return stage2.params, [stage1, stage2]


def direct_train(init_params: ModelParams, utterances: Sequence[Utterance], tokenizer: BpeModel,
                 config: TrainConfig, out_dir=None) -> tuple[ModelParams, StageResult]:
    out = Path(out_dir) if out_dir else None
    res = train_stage(init_params, Dataset(utterances, "han_text", config.max_frames), tokenizer,
                      _unfrozen(config), "direct", out / "train_log.jsonl" if out else None)
    if out:
        save_checkpoint(res.params, out / "direct.ckpt", "direct")
    return res.params, res


def pretrain_encoder(params: ModelParams, source: Dataset, tokenizer: BpeModel, config: TrainConfig,
                     out_dir=None) -> ModelParams:
    """Supervised transducer training on the source language; returns the full model."""
    out = Path(out_dir) if out_dir else None
    res = train_stage(params, source, tokenizer, _unfrozen(config), "pretrain",
                      out / "train_log.jsonl" if out else None)
    if out:
        save_checkpoint(res.params, out / "pretrain.ckpt", "pretrain")
    return res.params


def transfer_encoder(pretrained: ModelParams, seed: int) -> ModelParams:
    """Keep the pretrained encoder, re-initialise prediction and joint networks."""
    rng = np.random.default_rng([seed, 17])
    return reinit_components(pretrained, ("prediction", "joint"), rng).with_stage("pretrain")


def _unfrozen(config: TrainConfig) -> TrainConfig:
    return replace(config, freeze=frozenset())
