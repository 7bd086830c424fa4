"""Seeded synthetic token source: an order-1 Markov chain with sparse rows."""
from dataclasses import dataclass

import numpy as np

from .numerics import Prng, sample_without_replacement


@dataclass(frozen=True)
class MarkovSource:
    transition: np.ndarray  # (V, V), rows sum to 1

    @classmethod
    def random(cls, vocab_size: int, seed: int, branching: int = 4) -> "MarkovSource":
        """Each token gets ``branching`` successors with random weights."""
        rng = Prng(seed)
        branching = min(branching, vocab_size)
        t = np.zeros((vocab_size, vocab_size))
        for row in range(vocab_size):
            succ = [s - 1 for s in sample_without_replacement(vocab_size, branching, rng)]
            w = rng.random_array(branching) + 0.1
            t[row, succ] = w / w.sum()
        return cls(t)

    @property
    def vocab_size(self) -> int:
        return self.transition.shape[0]

    def sample(self, length: int, rng: Prng) -> np.ndarray:
        cdf = np.cumsum(self.transition, axis=1)
        out = np.empty(length, dtype=np.int64)
        state = rng.below(self.vocab_size)
        u = rng.random_array(length)
        for i in range(length):
            out[i] = state
            state = min(int(np.searchsorted(cdf[state], u[i], side="right")), self.vocab_size - 1)
        return out

    def entropy_rate(self) -> float:
        """Entropy of the chain under its stationary distribution, in nats."""
        vals, vecs = np.linalg.eig(self.transition.T)
        pi = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
        pi = pi / pi.sum()
        with np.errstate(divide="ignore", invalid="ignore"):
            row_h = -np.nansum(np.where(self.transition > 0, self.transition * np.log(self.transition), 0.0), axis=1)
        return float(pi @ row_h)


def make_corpus(vocab_size: int, seed: int, train_tokens: int = 16000, heldout_tokens: int = 4000):
    """Return ``(source, train, heldout)`` drawn from one seeded chain."""
    source = MarkovSource.random(vocab_size, seed)
    rng = Prng(seed ^ 0x5EED)
    return source, source.sample(train_tokens, rng), source.sample(heldout_tokens, rng)


def chunk(tokens, length: int) -> np.ndarray:
    """Non-overlapping windows of ``length`` tokens, as rows."""
    tokens = np.asarray(tokens, dtype=np.int64)
    n = len(tokens) // length
    return tokens[: n * length].reshape(n, length)


def sample_windows(tokens, batch: int, length: int, rng: Prng) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    span = len(tokens) - length
    if span < 0:
        raise ValueError(f"corpus of {len(tokens)} tokens is shorter than a window of {length}")
    starts = [rng.below(span + 1) for _ in range(batch)]
    return np.stack([tokens[s: s + length] for s in starts])
