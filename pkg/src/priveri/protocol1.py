"""Logit fingerprinting with sentinel tokens.

The user hides K sentinel tokens at random slots of the prompt, isolates
them with the attention mask, and checks the returned sentinel logits
against a public cache computed once on the trusted model.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CacheMissError, DimensionError, FormatError, InfeasibleError, IntegrityError
from .model import ModelParams, causal_mask, forward, forward_causal
from .numerics import Prng, argmax_lowest, sample_without_replacement, seqsum

DEFAULT_TOL = 1e-9
CACHE_MAGIC = b"PVCACHE1"
_HEADER = struct.Struct("<8s32sIIQ")


@dataclass(frozen=True, eq=False)
class SentinelCache:
    model_hash: bytes
    K: int
    V: int
    entries: dict = field(repr=False)  # tuple[int, ...] -> (K, V) logits

    def __len__(self):
        return len(self.entries)

    def __contains__(self, seq):
        return tuple(int(t) for t in seq) in self.entries

    def lookup(self, seq) -> np.ndarray:
        key = tuple(int(t) for t in seq)
        try:
            return self.entries[key]
        except KeyError:
            raise CacheMissError(f"sentinel sequence {key} not in cache") from None

    def sequences(self) -> list[tuple[int, ...]]:
        return list(self.entries)


def generate_cache(model: ModelParams, cache_size: int, K: int, rng: Prng) -> SentinelCache:
    """Draw distinct K-token sequences and store their standalone causal logits."""
    V = model.config.vocab_size
    if cache_size < 1 or K < 1:
        raise ValueError("cache_size and K must be >= 1")
    if cache_size > V ** K:
        raise InfeasibleError(f"only {V ** K} distinct sequences of length {K} exist")
    if K > model.config.max_positions:
        raise ValueError("K exceeds max_positions")
    entries = {}
    while len(entries) < cache_size:
        seq = tuple(rng.below(V) for _ in range(K))
        if seq in entries:
            continue
        logits = forward_causal(model, seq).logits
        logits.flags.writeable = False
        entries[seq] = logits
    return SentinelCache(model.hash, K, V, entries)


def encode_cache(cache: SentinelCache) -> bytes:
    """Binary cache layout followed by a SHA-256 trailer over everything before it."""
    parts = [_HEADER.pack(CACHE_MAGIC, cache.model_hash, cache.K, cache.V, len(cache.entries))]
    for seq, logits in cache.entries.items():
        parts.append(np.asarray(seq, dtype="<u4").tobytes())
        parts.append(np.ascontiguousarray(logits, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode_cache(data: bytes) -> SentinelCache:
    if len(data) < _HEADER.size + 32:
        raise FormatError("cache file truncated")
    body, trailer = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != trailer:
        raise IntegrityError("cache digest mismatch")
    magic, model_hash, K, V, count = _HEADER.unpack_from(body)
    if magic != CACHE_MAGIC:
        raise FormatError(f"bad cache magic {magic!r}")
    entry_bytes = 4 * K + 8 * K * V
    if len(body) != _HEADER.size + count * entry_bytes:
        raise FormatError("cache length does not match header")
    entries = {}
    off = _HEADER.size
    for _ in range(count):
        seq = tuple(int(t) for t in np.frombuffer(body, dtype="<u4", count=K, offset=off))
        off += 4 * K
        logits = np.frombuffer(body, dtype="<f8", count=K * V, offset=off).reshape(K, V).astype(np.float64)
        logits.flags.writeable = False
        off += 8 * K * V
        entries[seq] = logits
    return SentinelCache(model_hash, K, V, entries)


def save_cache(cache: SentinelCache, path) -> Path:
    path = Path(path)
    path.write_bytes(encode_cache(cache))
    return path


def load_cache(path) -> SentinelCache:
    return decode_cache(Path(path).read_bytes())


@dataclass(frozen=True, eq=False)
class AugmentedRequest:
    """Sentinel-augmented input. Slot numbers are 1-based throughout."""

    tokens: tuple  # length N+K token ids
    mask2d: np.ndarray  # (N+K, N+K)
    position_ids: tuple
    sentinel_positions: tuple  # sorted p_1 < ... < p_K
    sentinel_sequence: tuple

    @property
    def length(self) -> int:
        return len(self.tokens)

    @property
    def K(self) -> int:
        return len(self.sentinel_positions)

    @property
    def N(self) -> int:
        return self.length - self.K

    @property
    def original_positions(self) -> list[int]:
        hidden = set(self.sentinel_positions)
        return [p for p in range(1, self.length + 1) if p not in hidden]


def build_request_at(prompt, sentinel_sequence, positions, prompt_mask=None) -> AugmentedRequest:
    """Deterministic half of request construction, for given sentinel slots."""
    prompt = [int(t) for t in prompt]
    sentinel = tuple(int(t) for t in sentinel_sequence)
    N, K = len(prompt), len(sentinel)
    if N < 1:
        raise ValueError("prompt must contain at least one token")
    if K < 1:
        raise ValueError("need at least one sentinel token")
    positions = tuple(sorted(int(p) for p in positions))
    L = N + K
    if len(set(positions)) != K or positions[0] < 1 or positions[-1] > L:
        raise ValueError(f"need {K} distinct sentinel slots in [1, {L}]")
    base = causal_mask(N) if prompt_mask is None else np.asarray(prompt_mask, dtype=np.float64)
    if base.shape != (N, N):
        raise DimensionError(f"prompt mask shape {base.shape}, expected {(N, N)}")

    is_sentinel = np.zeros(L, dtype=bool)
    is_sentinel[np.array(positions) - 1] = True
    orig_idx = np.flatnonzero(~is_sentinel)
    sent_idx = np.array(positions) - 1

    mask = np.zeros((L, L))
    mask[np.ix_(orig_idx, orig_idx)] = base
    for i in range(K):
        for j in range(i + 1):
            mask[sent_idx[i], sent_idx[j]] = 1.0
        for j in range(i, K):
            mask[sent_idx[j], sent_idx[i]] = 1.0

    tokens = np.empty(L, dtype=np.int64)
    tokens[sent_idx] = sentinel
    tokens[orig_idx] = prompt
    pos = np.empty(L, dtype=np.int64)
    pos[sent_idx] = np.arange(1, K + 1)
    pos[orig_idx] = np.arange(1, N + 1)
    return AugmentedRequest(tuple(int(t) for t in tokens), mask, tuple(int(p) for p in pos), positions, sentinel)


def build_request(prompt, sentinel_sequence, rng: Prng, prompt_mask=None) -> AugmentedRequest:
    """Insert the sentinels at K slots drawn uniformly from ``1..N+K``."""
    N, K = len(prompt), len(sentinel_sequence)
    if N < 1:
        raise ValueError("prompt must contain at least one token")
    if K < 1:
        raise ValueError("need at least one sentinel token")
    positions = sample_without_replacement(N + K, K, rng)
    return build_request_at(prompt, sentinel_sequence, positions, prompt_mask)


def run_request(model: ModelParams, request: AugmentedRequest):
    """Honest provider computation for a plaintext request."""
    return forward(model, list(request.tokens), request.mask2d, list(request.position_ids))


@dataclass(frozen=True)
class VerificationResult:
    verified: bool
    per_sentinel_l1: tuple
    tol: float


def l1(a, b) -> float:
    return float(seqsum(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)).reshape(-1)))


def verify_rows(logits, positions, sentinel_sequence, cache: SentinelCache, tol: float) -> VerificationResult:
    expected = cache.lookup(sentinel_sequence)
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] != cache.V:
        raise DimensionError(f"logits shape {logits.shape} incompatible with V={cache.V}")
    if len(positions) != cache.K:
        raise DimensionError(f"{len(positions)} sentinel slots for K={cache.K}")
    distances = tuple(l1(logits[p - 1], expected[i]) for i, p in enumerate(positions))
    return VerificationResult(all(d <= tol for d in distances), distances, tol)


def verify(logits, request: AugmentedRequest, cache: SentinelCache, tol: float = DEFAULT_TOL) -> VerificationResult:
    """L1-compare the returned sentinel rows with the cached ones."""
    if np.asarray(logits).shape[0] != request.length:
        raise DimensionError("logit rows do not match request length")
    return verify_rows(logits, request.sentinel_positions, request.sentinel_sequence, cache, tol)


def fingerprint(model: ModelParams, sequence) -> np.ndarray:
    """Concatenated next-token logits of a standalone causal run."""
    return forward_causal(model, list(sequence)).logits.reshape(-1)


def fingerprint_distance(f1, f2) -> float:
    """L1 distance over the first ``min(len)`` coordinates."""
    f1 = np.asarray(f1, dtype=np.float64).reshape(-1)
    f2 = np.asarray(f2, dtype=np.float64).reshape(-1)
    n = min(f1.size, f2.size)
    return l1(f1[:n], f2[:n]) if n else 0.0


# non-interactive generation -------------------------------------------------

@dataclass(frozen=True)
class PositionSchedule:
    N: int
    K: int
    steps: tuple  # steps[i-1]: sorted sentinel slots for step i

    def __len__(self):
        return len(self.steps)


def pregenerate_schedule(N: int, K: int, M: int, rng: Prng) -> PositionSchedule:
    """Sentinel slots for every step; step i draws from ``1..N+i-1+K``."""
    if M < 1:
        raise ValueError("M must be >= 1")
    if N < 1 or K < 1:
        raise ValueError("N and K must be >= 1")
    steps = tuple(tuple(sample_without_replacement(N + i + K, K, rng)) for i in range(M))
    return PositionSchedule(N, K, steps)


@dataclass(frozen=True)
class AugmentedGeneration:
    tokens: list  # emitted tokens
    transcript: list  # per-step (N_i+K, V) logits
    requests: list


def last_original_row(logits, positions) -> np.ndarray:
    hidden = set(positions)
    last = max(p for p in range(1, logits.shape[0] + 1) if p not in hidden)
    return logits[last - 1]


def generate_augmented(model: ModelParams, prompt, sentinel_sequence, schedule: PositionSchedule,
                       n_steps: int, responder=None, sampler=None) -> AugmentedGeneration:
    """Greedy generation where every step carries the scheduled sentinels.

    ``responder(request) -> logits`` defaults to the honest forward pass and
    ``sampler(step, row) -> token`` (1-based step) to the lowest-index argmax.
    """
    if n_steps > len(schedule):
        raise ValueError("schedule is shorter than the requested number of steps")
    if responder is None:
        def responder(req):
            return run_request(model, req).logits
    context = [int(t) for t in prompt]
    emitted, transcript, requests = [], [], []
    for i in range(n_steps):
        req = build_request_at(context, sentinel_sequence, schedule.steps[i])
        logits = responder(req)
        row = last_original_row(logits, req.sentinel_positions)
        token = argmax_lowest(row) if sampler is None else int(sampler(i + 1, row))
        emitted.append(token)
        transcript.append(logits)
        requests.append(req)
        context.append(token)
    return AugmentedGeneration(emitted, transcript, requests)


@dataclass(frozen=True)
class TranscriptCheck:
    verified: bool
    first_failure: int | None  # 1-based step index


def verify_transcript(transcript: Sequence, schedule: PositionSchedule, cache: SentinelCache,
                      sentinel_sequences, tol: float = DEFAULT_TOL) -> TranscriptCheck:
    """Batch sentinel check of every generation step after the fact.

    ``sentinel_sequences`` is one sequence shared by all steps or a list
    with one sequence per step.
    """
    if len(transcript) > len(schedule):
        raise ValueError("schedule is shorter than the transcript")
    per_step = _per_step_sequences(sentinel_sequences, len(transcript))
    for i, logits in enumerate(transcript):
        if not verify_rows(logits, schedule.steps[i], per_step[i], cache, tol).verified:
            return TranscriptCheck(False, i + 1)
    return TranscriptCheck(True, None)


def _per_step_sequences(seqs, n):
    seqs = list(seqs)
    if seqs and isinstance(seqs[0], (int, np.integer)):
        return [tuple(seqs)] * n
    if len(seqs) < n:
        raise ValueError("fewer sentinel sequences than steps")
    return [tuple(s) for s in seqs]


def verify_greedy_sampling(transcript: Sequence, tokens: Sequence, schedule: PositionSchedule | None = None) -> TranscriptCheck:
    """Each claimed token must be the argmax of its step's last prompt row.

    Without a schedule the last row of each step is used; with one, the
    last non-sentinel row.
    """
    if len(transcript) != len(tokens):
        raise ValueError("transcript and token counts differ")
    for i, (logits, token) in enumerate(zip(transcript, tokens)):
        logits = np.asarray(getattr(logits, "logits", logits))
        row = logits[-1] if schedule is None else last_original_row(logits, schedule.steps[i])
        if argmax_lowest(row) != int(token):
            return TranscriptCheck(False, i + 1)
    return TranscriptCheck(True, None)
