"""Transducer acoustic model: encoder, stateless prediction network, joint network.

The encoder stacks ``subsample`` consecutive feature frames and runs a
feedforward stack.  The prediction network sees only the two previous
tokens.  The joint network adds one encoder frame and one prediction vector,
applies tanh and projects onto blank plus the vocabulary.
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor
from .transducer import LatticeSegment

BLANK = 0
MAGIC = b"CLFT"
FORMAT_VERSION = 1
STAGE_TAGS = {"random": 0, "pretrain": 1, "stage1": 2, "stage2": 3, "direct": 4}
COMPONENTS = ("encoder", "prediction", "joint")
_NONLIN = {"tanh": 0, "relu": 1}


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    input_dim: int = 16
    subsample: int = 2
    num_layers: int = 2
    hidden_dim: int = 128
    d_model: int = 256
    embed_dim: int = 256
    nonlinearity: str = "tanh"

    def __post_init__(self):
        for name in ("vocab_size", "input_dim", "subsample", "num_layers",
                     "hidden_dim", "d_model", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.nonlinearity not in _NONLIN:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter names and shapes in checkpoint order."""
        out = {}
        widths = [self.input_dim * self.subsample] + [self.hidden_dim] * (self.num_layers - 1) + [self.d_model]
        for i in range(self.num_layers):
            out[f"encoder.{i}.weight"] = (widths[i], widths[i + 1])
            out[f"encoder.{i}.bias"] = (widths[i + 1],)
        out["prediction.embedding"] = (self.vocab_size + 1, self.embed_dim)
        out["prediction.weight"] = (2 * self.embed_dim, self.d_model)
        out["prediction.bias"] = (self.d_model,)
        out["joint.weight"] = (self.d_model, self.vocab_size + 1)
        out["joint.bias"] = (self.vocab_size + 1,)
        return out


@dataclass
class Utterance:
    id: str
    features: np.ndarray
    tailo_text: str = ""
    han_text: str = ""

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor]
    stage: str = "random"
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        shapes = self.config.shapes()
        if list(self.tensors) != list(shapes):
            raise DimensionError("parameter names do not match the configuration")
        for name, shape in shapes.items():
            if self.tensors[name].shape != shape:
                raise DimensionError(f"{name} has shape {self.tensors[name].shape}, expected {shape}")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelParams) or other.config != self.config:
            return False
        return all(np.array_equal(self.tensors[k].data, other.tensors[k].data) for k in self.tensors)

    def names(self, component: str | None = None) -> list[str]:
        return [n for n in self.tensors if component is None or n.split(".")[0] == component]

    def replace(self, updates: dict[str, np.ndarray | Tensor], stage: str | None = None) -> "ModelParams":
        tensors = dict(self.tensors)
        for name, value in updates.items():
            tensors[name] = value if isinstance(value, Tensor) else Tensor(value)
        return ModelParams(self.config, tensors, stage or self.stage)

    def with_stage(self, stage: str) -> "ModelParams":
        return ModelParams(self.config, self.tensors, stage)


def init_params(config: ModelConfig, rng: np.random.Generator | int = 0) -> ModelParams:
    """Gaussian init scaled by 1/sqrt(fan_in); zero biases."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    tensors = {}
    for name, shape in config.shapes().items():
        if name.endswith("bias"):
            arr = np.zeros(shape)
        elif name == "prediction.embedding":
            arr = rng.standard_normal(shape)
        else:
            arr = rng.standard_normal(shape) / math.sqrt(shape[0])
        tensors[name] = Tensor(arr)
    return ModelParams(config, tensors)


def reinit_components(params: ModelParams, components: Sequence[str], rng) -> ModelParams:
    fresh = init_params(params.config, rng)
    updates = {n: fresh[n] for c in components for n in params.names(c)}
    return params.replace(updates)


# ---------------------------------------------------------------------------
# forward pieces


def _act(config: ModelConfig, x: Tensor) -> Tensor:
    return nx.tanh(x) if config.nonlinearity == "tanh" else nx.relu(x)


def stack_frames(features: np.ndarray, subsample: int) -> np.ndarray:
    """Concatenate ``subsample`` consecutive frames, zero-padding the tail."""
    feats = np.asarray(features, dtype=np.float64)
    T, d = feats.shape
    out_frames = -(-T // subsample)
    padded = np.zeros((out_frames * subsample, d))
    padded[:T] = feats
    return padded.reshape(out_frames, subsample * d)


def _encode_stacked(params: ModelParams, stacked: np.ndarray) -> Tensor:
    cfg = params.config
    h = Tensor(stacked, copy=False)
    for i in range(cfg.num_layers):
        h = _act(cfg, nx.add(nx.matmul(h, params[f"encoder.{i}.weight"]), params[f"encoder.{i}.bias"]))
    return h


def encode(params: ModelParams, features) -> Tensor:
    """Frames (T x d) to encoder states (ceil(T / subsample) x d_model)."""
    feats = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != params.config.input_dim or feats.shape[0] < 1:
        raise DimensionError(f"features of shape {feats.shape} do not match input_dim {params.config.input_dim}")
    return _encode_stacked(params, stack_frames(feats, params.config.subsample))


def context_ids(targets: Sequence[int]) -> tuple[list[int], list[int]]:
    """(prev2, prev1) for every output position 0..U; position 0 sees (BOS, BOS)."""
    padded = [BLANK, BLANK] + list(targets)
    return padded[:-1][:len(targets) + 1], padded[1:][:len(targets) + 1]


def predict_contexts(params: ModelParams, prev2: Sequence[int], prev1: Sequence[int]) -> Tensor:
    """Prediction vectors for paired contexts, one row each."""
    table = params["prediction.embedding"]
    emb = nx.concat([nx.embedding_lookup(table, prev2), nx.embedding_lookup(table, prev1)])
    return _act(params.config, nx.add(nx.matmul(emb, params["prediction.weight"]), params["prediction.bias"]))


def predict(params: ModelParams, prev2: int, prev1: int) -> Tensor:
    """Prediction vector (d_model,) for the context (prev2, prev1); 0 is BOS."""
    return nx.reshape(predict_contexts(params, [prev2], [prev1]), (params.config.d_model,))


def _joint_rows(params: ModelParams, summed: Tensor) -> Tensor:
    logits = nx.add(nx.matmul(nx.tanh(summed), params["joint.weight"]), params["joint.bias"])
    return nx.log_softmax(logits)


def joint(params: ModelParams, h_enc: Tensor, h_pred: Tensor) -> Tensor:
    """Log-probabilities over blank + vocabulary for one (frame, context) pair."""
    d = params.config.d_model
    if h_enc.shape != (d,) or h_pred.shape != (d,):
        raise DimensionError(f"joint inputs {h_enc.shape} and {h_pred.shape} must both be ({d},)")
    summed = nx.reshape(nx.add(h_enc, h_pred), (1, d))
    return nx.reshape(_joint_rows(params, summed), (params.config.vocab_size + 1,))


def forward_lattice(params: ModelParams, features, targets: Sequence[int]) -> Tensor:
    """Joint log-probabilities shaped (T', U + 1, V + 1) for one utterance."""
    flat, segments = forward_batch(params, [features], [targets])
    seg = segments[0]
    return nx.reshape(flat, (seg.frames, len(seg.targets) + 1, params.config.vocab_size + 1))


def forward_batch(params: ModelParams, features: Sequence, targets: Sequence[Sequence[int]]
                  ) -> tuple[Tensor, list[LatticeSegment]]:
    """All lattices of a batch packed row-wise (t-major within each utterance).

    The encoder and prediction network each run once over the whole batch;
    the joint input rows are gathered from both and added.
    """
    cfg = params.config
    stacked, prev2, prev1 = [], [], []
    enc_idx, pred_idx, segments = [], [], []
    enc_off = pred_off = row_off = 0
    for feats, ys in zip(features, targets):
        feats = feats.data if isinstance(feats, Tensor) else np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != cfg.input_dim or feats.shape[0] < 1:
            raise DimensionError(f"features of shape {feats.shape} do not match input_dim {cfg.input_dim}")
        ys = tuple(int(y) for y in ys)
        bad = [y for y in ys if not 1 <= y <= cfg.vocab_size]
        if bad:
            raise IndexError(f"target id {bad[0]} outside [1, {cfg.vocab_size}]")
        frames = stack_frames(feats, cfg.subsample)
        T, U1 = frames.shape[0], len(ys) + 1
        stacked.append(frames)
        p2, p1 = context_ids(ys)
        prev2 += p2
        prev1 += p1
        enc_idx.append(np.repeat(np.arange(T) + enc_off, U1))
        pred_idx.append(np.tile(np.arange(U1) + pred_off, T))
        segments.append(LatticeSegment(row_off, T, ys))
        enc_off += T
        pred_off += U1
        row_off += T * U1
    enc = _encode_stacked(params, np.concatenate(stacked))
    pred = predict_contexts(params, prev2, prev1)
    summed = nx.add(nx.embedding_lookup(enc, np.concatenate(enc_idx)),
                    nx.embedding_lookup(pred, np.concatenate(pred_idx)))
    return _joint_rows(params, summed), segments


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: b"CLFT" | u32 version | u8 stage | u32 n_dims | n_dims x u32 dims
#         | float64 LE blobs for every parameter in ModelConfig.shapes() order

_DIM_FIELDS = ("input_dim", "subsample", "num_layers", "hidden_dim", "d_model", "embed_dim", "vocab_size")


def save_checkpoint(params: ModelParams, path, stage: str | None = None) -> None:
    """Write atomically (temporary file, then rename)."""
    stage = stage or params.stage
    cfg = params.config
    dims = [getattr(cfg, f) for f in _DIM_FIELDS] + [_NONLIN[cfg.nonlinearity]]
    parts = [MAGIC, struct.pack("<IB", FORMAT_VERSION, STAGE_TAGS[stage]),
             struct.pack(f"<I{len(dims)}I", len(dims), *dims)]
    for name in cfg.shapes():
        parts.append(params[name].data.astype("<f8").tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    with os.fdopen(fd, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if len(raw) < 9 or raw[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic (expected {MAGIC!r})")
    version, tag = struct.unpack_from("<IB", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: version {version}, expected {FORMAT_VERSION}")
    stages = {v: k for k, v in STAGE_TAGS.items()}
    if tag not in stages:
        raise CheckpointFormatError(f"{path}: unknown stage tag {tag}")
    pos = 9
    if len(raw) < pos + 4:
        raise CheckpointFormatError(f"{path}: truncated dims block")
    (n_dims,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if n_dims != len(_DIM_FIELDS) + 1 or len(raw) < pos + 4 * n_dims:
        raise CheckpointFormatError(f"{path}: dims block has {n_dims} fields, expected {len(_DIM_FIELDS) + 1}")
    dims = struct.unpack_from(f"<{n_dims}I", raw, pos)
    pos += 4 * n_dims
    nonlin = {v: k for k, v in _NONLIN.items()}.get(dims[-1])
    if nonlin is None:
        raise CheckpointFormatError(f"{path}: unknown nonlinearity code {dims[-1]}")
    try:
        cfg = ModelConfig(**dict(zip(_DIM_FIELDS, dims[:-1])), nonlinearity=nonlin)
    except ValueError as exc:
        raise CheckpointFormatError(f"{path}: inconsistent dims ({exc})") from None
    tensors = {}
    for name, shape in cfg.shapes().items():
        nbytes = 8 * math.prod(shape)
        if len(raw) < pos + nbytes:
            raise CheckpointFormatError(f"{path}: truncated in parameter {name}")
        tensors[name] = Tensor(np.frombuffer(raw, dtype="<f8", count=math.prod(shape), offset=pos).reshape(shape))
        pos += nbytes
    if pos != len(raw):
        raise CheckpointFormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return ModelParams(cfg, tensors, stages[tag])


def config_dict(config: ModelConfig) -> dict:
    return asdict(config)
