"""Model configuration, weight initialisation, serialisation and hashing."""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import FormatError
from ..numerics import Prng
from ..records import decode_record, encode_record, read_record, write_record

MODEL_MAGIC = "PVMODEL1"

# Linear layers subject to low-rank / quantisation perturbations.
LINEAR_KEYS = ("w_q", "w_k", "w_v", "w_out", "w_up", "w_down")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    embed_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    mlp_mult: int = 4
    max_positions: int = 512
    eps: float = 1e-6

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.n_layers < 1 or self.n_heads < 1 or self.mlp_mult < 1:
            raise ValueError("n_layers, n_heads and mlp_mult must be >= 1")
        if self.embed_dim < 1 or self.embed_dim % self.n_heads:
            raise ValueError("embed_dim must be a positive multiple of n_heads")
        if self.max_positions < 1:
            raise ValueError("max_positions must be >= 1")
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    @property
    def hidden_dim(self) -> int:
        return self.embed_dim

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        d, V = self.embed_dim, self.vocab_size
        shapes = {"token_embedding": (V, d), "position_embedding": (self.max_positions, d)}
        for i in range(self.n_layers):
            shapes[f"layers.{i}.attn_norm"] = (d,)
            shapes[f"layers.{i}.w_q"] = (d, d)
            shapes[f"layers.{i}.w_k"] = (d, d)
            shapes[f"layers.{i}.w_v"] = (d, d)
            shapes[f"layers.{i}.w_out"] = (d, d)
            shapes[f"layers.{i}.mlp_norm"] = (d,)
            shapes[f"layers.{i}.w_up"] = (d, self.mlp_mult * d)
            shapes[f"layers.{i}.w_down"] = (self.mlp_mult * d, d)
        shapes["final_norm"] = (d,)
        shapes["unembedding"] = (d, V)
        return shapes


def _freeze(arr):
    arr = np.array(arr, dtype=np.float64, order="C")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Immutable weights plus the SHA-256 of their canonical blob."""

    config: ModelConfig
    tensors: dict = field(repr=False)
    hash: bytes = b""

    @classmethod
    def build(cls, config: ModelConfig, tensors: dict) -> "ModelParams":
        shapes = config.tensor_shapes()
        if set(tensors) != set(shapes):
            raise ValueError(f"tensor names differ from config: {sorted(set(tensors) ^ set(shapes))}")
        ordered = {}
        for name, shape in shapes.items():
            arr = _freeze(tensors[name])
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape}, expected {shape}")
            if not np.isfinite(arr).all():
                raise ValueError(f"{name}: non-finite weights")
            ordered[name] = arr
        _, blob = encode_record(MODEL_MAGIC, {}, ordered)
        return cls(config, ordered, hashlib.sha256(blob).digest())

    def __getitem__(self, name):
        return self.tensors[name]

    def replace(self, **updates) -> "ModelParams":
        return ModelParams.build(self.config, {**self.tensors, **updates})

    def linear_keys(self):
        return [f"layers.{i}.{k}" for i in range(self.config.n_layers) for k in LINEAR_KEYS]

    @property
    def hash_hex(self) -> str:
        return self.hash.hex()


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Scaled-normal initialisation (std 0.02; output projections / sqrt(2 L))."""
    if not isinstance(config, ModelConfig):
        raise ValueError("init_params needs a ModelConfig")
    rng = Prng(seed)
    out_scale = 1.0 / math.sqrt(2 * config.n_layers)
    tensors = {}
    for name, shape in config.tensor_shapes().items():
        if name.endswith("norm"):
            tensors[name] = np.ones(shape)
            continue
        std = 0.02 * (out_scale if name.endswith(("w_out", "w_down")) else 1.0)
        tensors[name] = rng.normal_array(int(np.prod(shape))).reshape(shape) * std
    return ModelParams.build(config, tensors)


def serialize(params: ModelParams):
    """Return ``(manifest_bytes, blob_bytes)``."""
    return encode_record(MODEL_MAGIC, {"config": asdict(params.config)}, params.tensors)


def _from_record(manifest, tensors) -> ModelParams:
    try:
        config = ModelConfig(**manifest["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad model config: {exc}") from exc
    shapes = config.tensor_shapes()
    if {k: tuple(v.shape) for k, v in tensors.items()} != shapes:
        raise FormatError("tensor index does not match model config")
    return ModelParams.build(config, tensors)


def deserialize(manifest: bytes, blob: bytes) -> ModelParams:
    params = _from_record(*decode_record(manifest, blob, MODEL_MAGIC))
    return params


def save_model(params: ModelParams, path):
    return write_record(path, MODEL_MAGIC, {"config": asdict(params.config)}, params.tensors)


def load_model(path) -> ModelParams:
    return _from_record(*read_record(path, MODEL_MAGIC))
