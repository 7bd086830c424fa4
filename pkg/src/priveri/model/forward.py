"""Pre-norm decoder stack with an explicit 2D mask and explicit position ids."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DimensionError
from ..numerics import argmax_lowest, matmul
from ..numerics.autodiff import EagerOps
from .params import ModelParams


@dataclass(frozen=True)
class ForwardOutput:
    hidden: np.ndarray  # (L, d_h) after the final norm
    logits: np.ndarray  # (L, V) == hidden @ unembedding


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n)))


def decoder(ops, w, config, x_emb, mask, pos):
    """Hidden states for a batch ``x_emb`` of shape (B, L, d).

    ``w`` maps tensor names to arrays (eager) or tape nodes; ``mask`` is
    (L, L) or (B, 1, L, L); ``pos`` holds 1-based position ids, shape (B, L).
    """
    B, L, d = x_emb.shape
    H, hd = config.n_heads, config.head_dim
    scale = 1.0 / float(np.sqrt(hd))
    x = ops.add(x_emb, ops.take_rows(w["position_embedding"], np.asarray(pos) - 1))
    for i in range(config.n_layers):
        p = f"layers.{i}."
        h = ops.rms_norm(x, w[p + "attn_norm"], config.eps)
        q = ops.transpose(ops.reshape(ops.matmul(h, w[p + "w_q"]), (B, L, H, hd)), (0, 2, 1, 3))
        kt = ops.transpose(ops.reshape(ops.matmul(h, w[p + "w_k"]), (B, L, H, hd)), (0, 2, 3, 1))
        v = ops.transpose(ops.reshape(ops.matmul(h, w[p + "w_v"]), (B, L, H, hd)), (0, 2, 1, 3))
        att = ops.softmax_masked(ops.scale(ops.matmul(q, kt), scale), mask)
        o = ops.reshape(ops.transpose(ops.matmul(att, v), (0, 2, 1, 3)), (B, L, d))
        x = ops.add(x, ops.matmul(o, w[p + "w_out"]))
        h = ops.rms_norm(x, w[p + "mlp_norm"], config.eps)
        x = ops.add(x, ops.matmul(ops.gelu(ops.matmul(h, w[p + "w_up"])), w[p + "w_down"]))
    return ops.rms_norm(x, w["final_norm"], config.eps)


def _check_mask(mask, L):
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (L, L):
        raise DimensionError(f"mask shape {mask.shape}, expected {(L, L)}")
    if not np.isin(mask, (0.0, 1.0)).all():
        raise ValueError("mask entries must be 0 or 1")
    if not (mask != 0).any(axis=1).all():
        raise ValueError("every mask row needs at least one 1")
    return mask


def _check_positions(position_ids, L, config):
    pos = np.asarray(position_ids, dtype=np.int64)
    if pos.shape != (L,):
        raise DimensionError(f"{pos.shape[0] if pos.ndim else 0} position ids for {L} inputs")
    if L and (pos.min() < 1 or pos.max() > config.max_positions):
        raise ValueError(f"position ids must lie in [1, {config.max_positions}]")
    return pos


def embed_tokens(params: ModelParams, tokens) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1:
        raise DimensionError("token ids must be a flat sequence")
    if ids.size and (ids.min() < 0 or ids.max() >= params.config.vocab_size):
        raise ValueError(f"token id outside [0, {params.config.vocab_size})")
    return params["token_embedding"][ids]


def forward(params: ModelParams, inputs, mask2d, position_ids) -> ForwardOutput:
    """Run the model on token ids or on precomputed token-level embeddings.

    Embedding inputs replace the token-embedding lookup only; position
    embeddings are still added from ``position_ids``.
    """
    config = params.config
    arr = np.asarray(inputs)
    if arr.ndim == 2 and np.issubdtype(arr.dtype, np.floating):
        if arr.shape[1] != config.embed_dim:
            raise DimensionError(f"embedding width {arr.shape[1]} != {config.embed_dim}")
        x_emb = np.ascontiguousarray(arr, dtype=np.float64)
    else:
        x_emb = embed_tokens(params, arr)
    L = x_emb.shape[0]
    if L == 0:
        raise ValueError("empty input")
    mask = _check_mask(mask2d, L)
    pos = _check_positions(position_ids, L, config)
    hidden = decoder(EagerOps, params.tensors, config, x_emb[None], mask, pos[None])[0]
    return ForwardOutput(hidden, matmul(hidden, params["unembedding"]))


def forward_causal(params: ModelParams, tokens) -> ForwardOutput:
    n = len(tokens)
    return forward(params, tokens, causal_mask(n), np.arange(1, n + 1))


@dataclass(frozen=True)
class GreedyRun:
    tokens: list[int]  # emitted tokens only
    transcript: list[ForwardOutput]


def generate_greedy(params: ModelParams, prompt_tokens, n_steps: int) -> GreedyRun:
    """Greedy decoding; each step re-runs the full causal context."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    context = [int(t) for t in prompt_tokens]
    if not context:
        raise ValueError("prompt must be nonempty")
    if len(context) + n_steps - 1 > params.config.max_positions:
        raise ValueError("context would overflow max_positions")
    emitted, transcript = [], []
    for _ in range(n_steps):
        out = forward_causal(params, context)
        token = argmax_lowest(out.logits[-1])
        transcript.append(out)
        emitted.append(token)
        context.append(token)
    return GreedyRun(emitted, transcript)
