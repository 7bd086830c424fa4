"""Next-token training: AdamW pretraining and the single SGD fine-tune step."""
from __future__ import annotations

import numpy as np

from ..corpus import chunk, sample_windows
from ..errors import TrainingError
from ..numerics import GradTape, Prng, reverse_gradients
from ..numerics.autodiff import EagerOps
from .forward import causal_mask, decoder
from .params import ModelParams


class AdamW:
    """Decoupled weight decay Adam over a dict of named arrays."""

    def __init__(self, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict) -> dict:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        out = {}
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            m = self.b1 * m + (1.0 - self.b1) * g
            v = self.b2 * v + (1.0 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            p = p - self.lr * self.wd * p
            out[name] = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


def lm_loss(ops, weights, config, windows):
    """Mean next-token cross-entropy over (B, L+1) token windows."""
    windows = np.asarray(windows, dtype=np.int64)
    inputs, targets = windows[:, :-1], windows[:, 1:]
    B, L = inputs.shape
    x = ops.take_rows(weights["token_embedding"], inputs)
    pos = np.broadcast_to(np.arange(1, L + 1), (B, L))
    hidden = decoder(ops, weights, config, x, causal_mask(L), pos)
    return ops.cross_entropy(ops.matmul(hidden, weights["unembedding"]), targets)


def lm_gradients(params: ModelParams, windows):
    tape = GradTape()
    nodes = {k: tape.param(v, k) for k, v in params.tensors.items()}
    loss = lm_loss(tape, nodes, params.config, windows)
    return float(loss.value), reverse_gradients(tape, loss)


def log_loss(params: ModelParams, windows) -> float:
    """Held-out mean next-token log-loss in nats (no gradients)."""
    return float(lm_loss(EagerOps, params.tensors, params.config, windows))


def heldout_windows(tokens, seq_len: int = 32) -> np.ndarray:
    return chunk(tokens, seq_len + 1)


def pretrain(params: ModelParams, corpus, steps: int, batch: int = 8, lr: float = 3e-3,
             seed: int = 0, seq_len: int = 32, log=None) -> ModelParams:
    """AdamW on next-token cross-entropy over random corpus windows."""
    corpus = np.asarray(corpus, dtype=np.int64)
    if corpus.size == 0:
        raise ValueError("corpus is empty")
    if steps <= 0:
        return params
    seq_len = min(seq_len, corpus.size - 1)
    if seq_len < 1:
        raise ValueError("corpus needs at least two tokens")
    rng = Prng(seed)
    opt = AdamW(lr)
    weights = dict(params.tensors)
    for step in range(steps):
        windows = sample_windows(corpus, batch, seq_len + 1, rng)
        current = ModelParams(params.config, weights)
        loss, grads = lm_gradients(current, windows)
        if not np.isfinite(loss):
            raise TrainingError(f"loss diverged at step {step}")
        weights = opt.step(weights, grads)
        if log is not None:
            log(step, loss)
    return ModelParams.build(params.config, weights)


def perturb_finetune_step(params: ModelParams, batch, lr: float) -> ModelParams:
    """One plain SGD step on next-token cross-entropy over ``batch`` windows."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    _, grads = lm_gradients(params, batch)
    return ModelParams.build(params.config, {k: v - lr * grads[k] for k, v in params.tensors.items()})
