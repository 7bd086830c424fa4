"""Logit fingerprinting with injected, predictable noise.

A learned NoiseEmbedder mixes one of |B| noise codes into every prompt
embedding; a linear NoisePredictor must recover the code from the final
hidden state at each prompt slot. Sentinels stay un-noised and are checked
against the cache exactly as in the plain protocol.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import prod

import numpy as np

from .corpus import sample_windows
from .errors import DimensionError, FormatError, IntegrityError, TrainingError
from .model import ModelParams, causal_mask, decoder, forward
from .model.train import AdamW, log_loss
from .numerics import GradTape, Prng, argmax_lowest, matmul, reverse_gradients
from .numerics.autodiff import EagerOps
from .numerics.linalg import log_softmax, seqsum
from .protocol1 import DEFAULT_TOL, AugmentedRequest, SentinelCache, VerificationResult, build_request, verify_rows
from .records import read_record, write_record

NOISE_MAGIC = "PVNOISE1"
SHARED = "shared"
PER_POSITION = "per_position"


@dataclass(frozen=True)
class NoiseSet:
    size: int

    def __post_init__(self):
        if int(self.size) < 2:
            raise ValueError("a noise set needs at least two codes")

    def sample(self, rng: Prng) -> int:
        return rng.below(self.size)


def _noise_set(ns) -> NoiseSet:
    return ns if isinstance(ns, NoiseSet) else NoiseSet(int(ns))


@dataclass(frozen=True, eq=False)
class NoiseEmbedderParams:
    noise_embedding: np.ndarray  # (|B|, d_e)
    weight: np.ndarray  # (2 d_e, d_e), applied to concat(e, E[b])
    bias: np.ndarray  # (d_e,)

    @property
    def size(self):
        return self.noise_embedding.shape[0]


@dataclass(frozen=True, eq=False)
class NoisePredictorParams:
    weight: np.ndarray  # (d_h, |B|)
    bias: np.ndarray  # (|B|,)


@dataclass(frozen=True, eq=False)
class NoiseModules:
    embedder: NoiseEmbedderParams
    predictor: NoisePredictorParams
    base_hash: bytes = field(default=b"")

    @property
    def noise_set(self) -> NoiseSet:
        return NoiseSet(self.embedder.size)


def init_modules(model: ModelParams, noise_set, seed: int = 0, noise_std: float = 0.05) -> NoiseModules:
    """Small noise codes added straight onto the token embedding (``W = [I; I]``)
    and an all-zero predictor, which always answers id 0."""
    ns = _noise_set(noise_set)
    d = model.config.embed_dim
    rng = Prng(seed)
    E = rng.normal_array(ns.size * d).reshape(ns.size, d) * noise_std
    W = np.vstack([np.eye(d), np.eye(d)])
    ne = NoiseEmbedderParams(E, W, np.zeros(d))
    npred = NoisePredictorParams(np.zeros((model.config.hidden_dim, ns.size)), np.zeros(ns.size))
    return NoiseModules(ne, npred, model.hash)


def embed_noise(ne: NoiseEmbedderParams, e, b: int) -> np.ndarray:
    """``W.T @ concat(e, E[b]) + bias`` for a single token embedding."""
    if not 0 <= int(b) < ne.size:
        raise ValueError(f"noise id {b} outside [0, {ne.size})")
    e = np.asarray(e, dtype=np.float64)
    if e.shape != (ne.weight.shape[1],):
        raise DimensionError(f"embedding shape {e.shape}")
    z = np.concatenate([e, ne.noise_embedding[int(b)]])[None]
    return matmul(z, ne.weight)[0] + ne.bias


def embed_noise_rows(ne: NoiseEmbedderParams, e, ids) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    z = np.concatenate([e, ne.noise_embedding[np.asarray(ids, dtype=np.int64)]], axis=-1)
    return matmul(z, ne.weight) + ne.bias


def predict_noise(npred: NoisePredictorParams, h) -> int:
    """Argmax class for one hidden row; ties go to the lowest id."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (npred.weight.shape[0],):
        raise DimensionError(f"hidden row shape {h.shape}")
    return argmax_lowest(matmul(h[None], npred.weight)[0] + npred.bias)


def predict_noise_rows(npred: NoisePredictorParams, hidden) -> np.ndarray:
    scores = matmul(np.asarray(hidden, dtype=np.float64), npred.weight) + npred.bias
    return np.argmax(scores, axis=-1)


@dataclass(frozen=True, eq=False)
class NoisyRequest:
    base: AugmentedRequest
    embeddings: np.ndarray  # (N+K, d_e); sentinel rows are raw token embeddings
    noise_cache: tuple  # per slot; -1 at sentinel slots
    mode: str = SHARED

    @property
    def length(self):
        return self.base.length

    @property
    def sentinel_positions(self):
        return self.base.sentinel_positions

    @property
    def mask2d(self):
        return self.base.mask2d

    @property
    def position_ids(self):
        return self.base.position_ids

    @property
    def tokens(self):
        return self.base.tokens


def noise_request(base: AugmentedRequest, model: ModelParams, modules: NoiseModules, rng: Prng,
                  mode: str = SHARED) -> NoisyRequest:
    """Noise every non-sentinel slot of an existing request."""
    if mode not in (SHARED, PER_POSITION):
        raise ValueError(f"unknown noise mode {mode!r}")
    ns = modules.noise_set
    emb = model["token_embedding"][np.asarray(base.tokens, dtype=np.int64)].copy()
    sentinels = set(base.sentinel_positions)
    cache = [-1] * base.length
    shared = ns.sample(rng) if mode == SHARED else None
    slots = [p for p in range(1, base.length + 1) if p not in sentinels]
    for p in slots:
        cache[p - 1] = shared if mode == SHARED else ns.sample(rng)
    idx = np.array(slots) - 1
    emb[idx] = embed_noise_rows(modules.embedder, emb[idx], [cache[i] for i in idx])
    return NoisyRequest(base, emb, tuple(cache), mode)


def build_noisy_request(prompt, sentinel_sequence, modules: NoiseModules, model: ModelParams, rng: Prng,
                        mode: str = SHARED) -> NoisyRequest:
    """Sentinel request with noised prompt embeddings; slots are drawn first."""
    base = build_request(prompt, sentinel_sequence, rng)
    return noise_request(base, model, modules, rng, mode)


def run_noisy_request(model: ModelParams, request: NoisyRequest) -> np.ndarray:
    """Honest provider computation: final hidden states (N+K, d_h)."""
    return forward(model, request.embeddings, request.mask2d, list(request.position_ids)).hidden


@dataclass(frozen=True)
class NoisyVerificationResult:
    sentinel_check: VerificationResult
    noise_matches: tuple  # per non-sentinel slot, in slot order
    verified: bool


def verify_noisy(hidden, request: NoisyRequest, cache: SentinelCache, modules: NoiseModules,
                 model: ModelParams, tol: float = DEFAULT_TOL) -> NoisyVerificationResult:
    """Sentinel rows go through the unembedding and the cache check; the
    remaining rows must reproduce the injected noise codes."""
    if modules.base_hash and modules.base_hash != model.hash:
        raise IntegrityError("noise modules were trained against a different base model")
    hidden = np.asarray(hidden, dtype=np.float64)
    if hidden.shape != (request.length, model.config.hidden_dim):
        raise DimensionError(f"hidden shape {hidden.shape}")
    sentinels = list(request.sentinel_positions)
    sent_logits = matmul(hidden[np.array(sentinels) - 1], model["unembedding"])
    full = np.zeros((request.length, model.config.vocab_size))
    full[np.array(sentinels) - 1] = sent_logits
    check = verify_rows(full, sentinels, request.base.sentinel_sequence, cache, tol)
    slots = [p for p in range(1, request.length + 1) if p not in set(sentinels)]
    predicted = predict_noise_rows(modules.predictor, hidden[np.array(slots) - 1])
    matches = tuple(bool(int(b_hat) == request.noise_cache[p - 1]) for b_hat, p in zip(predicted, slots))
    return NoisyVerificationResult(check, matches, check.verified and all(matches))


# training ------------------------------------------------------------------

def noisy_objective(ops, model: ModelParams, ne: dict, npred: dict, windows, noise_ids, lam: float,
                    frozen=None):
    """LM negative log-likelihood on noised inputs plus ``lam`` x noise CE.

    ``ne`` holds ``noise_embedding``, ``weight``, ``bias``; ``npred`` holds
    ``weight``, ``bias`` (arrays or tape nodes). ``noise_ids`` is (B, L).
    Returns ``(total, lm, ce, hidden, noise_logits)``.
    """
    windows = np.asarray(windows, dtype=np.int64)
    inputs, targets = windows[:, :-1], windows[:, 1:]
    B, L = inputs.shape
    noise_ids = np.asarray(noise_ids, dtype=np.int64)
    w = frozen if frozen is not None else {k: ops.constant(v) for k, v in model.tensors.items()}
    e = ops.take_rows(w["token_embedding"], inputs)
    z = ops.concat(e, ops.take_rows(ne["noise_embedding"], noise_ids))
    x = ops.add(ops.matmul(z, ne["weight"]), ne["bias"])
    pos = np.broadcast_to(np.arange(1, L + 1), (B, L))
    hidden = decoder(ops, w, model.config, x, causal_mask(L), pos)
    lm = ops.cross_entropy(ops.matmul(hidden, w["unembedding"]), targets)
    noise_logits = ops.add(ops.matmul(hidden, npred["weight"]), npred["bias"])
    ce = ops.cross_entropy(noise_logits, noise_ids)
    total = ops.add(lm, ops.scale(ce, lam)) if lam != 0 else lm
    return total, lm, ce, hidden, noise_logits


def _module_arrays(modules: NoiseModules):
    return (
        {"noise_embedding": modules.embedder.noise_embedding, "weight": modules.embedder.weight,
         "bias": modules.embedder.bias},
        {"weight": modules.predictor.weight, "bias": modules.predictor.bias},
    )


def _modules_from(ne: dict, npred: dict, base_hash: bytes) -> NoiseModules:
    return NoiseModules(
        NoiseEmbedderParams(ne["noise_embedding"], ne["weight"], ne["bias"]),
        NoisePredictorParams(npred["weight"], npred["bias"]),
        base_hash,
    )


@dataclass(frozen=True)
class ModuleMetrics:
    heldout_log_loss: float  # noised inputs
    base_log_loss: float  # frozen base model, no noise
    noise_accuracy: float  # per-position, held-out
    steps: int
    loss_history: tuple = ()


def evaluate_modules(model: ModelParams, modules: NoiseModules, windows, rng: Prng, mode: str = SHARED,
                     batch: int = 64):
    """Held-out ``(noised log-loss, base log-loss, per-position noise accuracy)``."""
    windows = np.asarray(windows, dtype=np.int64)
    ne, npred = _module_arrays(modules)
    size = modules.noise_set.size
    lm_sum = base_sum = 0.0
    hits = total = count = 0
    L = windows.shape[1] - 1
    for start in range(0, len(windows), batch):
        chunk = windows[start: start + batch]
        B = len(chunk)
        ids = _draw_ids(rng, size, B, L, mode)
        _, lm, _, _, noise_logits = noisy_objective(EagerOps, model, ne, npred, chunk, ids, 0.0)
        base_lm = log_loss(model, chunk)
        lm_sum += float(lm) * B
        base_sum += float(base_lm) * B
        hits += int((np.argmax(noise_logits, axis=-1) == ids).sum())
        total += ids.size
        count += B
    return lm_sum / count, base_sum / count, hits / total


def _draw_ids(rng: Prng, size: int, batch: int, length: int, mode: str) -> np.ndarray:
    if mode == SHARED:
        return np.repeat(np.array([rng.below(size) for _ in range(batch)])[:, None], length, axis=1)
    return np.array([[rng.below(size) for _ in range(length)] for _ in range(batch)])


TEMPERATURES = np.geomspace(0.1, 1000.0, 81)


def calibrate_predictor(model: ModelParams, modules: NoiseModules, corpus, rng: Prng, n_windows: int = 64,
                        seq_len: int = 32, ridge: float = 1e-3, mode: str = SHARED) -> NoiseModules:
    """Warm start: ridge-regress one-hot noise ids on centred hidden states of a
    calibration batch, then pick the softmax temperature with the lowest CE.

    With a zero predictor the noise term has no gradient to work with until
    the predictor grows, and by then Adam has pushed the noise far enough to
    hurt the language model. Starting from a fitted readout avoids that.
    """
    size = modules.noise_set.size
    d = modules.predictor.weight.shape[0]
    windows = sample_windows(np.asarray(corpus, dtype=np.int64), n_windows, seq_len + 1, rng)
    ids = _draw_ids(rng, size, n_windows, seq_len, mode)
    ne, _ = _module_arrays(modules)
    zero = {"weight": np.zeros((d, size)), "bias": np.zeros(size)}
    hidden = noisy_objective(EagerOps, model, ne, zero, windows, ids, 0.0)[3].reshape(-1, d)
    y = ids.reshape(-1)
    mu = hidden.mean(axis=0)
    hc = hidden - mu
    A = np.linalg.solve(hc.T @ hc + ridge * np.eye(d), hc.T @ (np.eye(size)[y] - 1.0 / size))
    scores = hc @ A
    ces = [-log_softmax(t * scores)[np.arange(len(y)), y].mean() for t in TEMPERATURES]
    tau = float(TEMPERATURES[int(np.argmin(ces))])
    npred = NoisePredictorParams(tau * A, -tau * (mu @ A))
    return NoiseModules(modules.embedder, npred, modules.base_hash)


def train_modules(model: ModelParams, modules: NoiseModules, corpus, lam: float = 3.5, lr: float = 5e-4,
                  steps: int = 300, batch: int = 8, rng: Prng | None = None, seq_len: int = 32,
                  heldout=None, mode: str = SHARED, warm_start: bool = True, log=None):
    """Fit embedder and predictor with AdamW; the base model stays frozen.

    Returns ``(modules, metrics)``. Noise is drawn fresh per batch element
    and shared across its positions unless ``mode`` is per-position.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    rng = rng if rng is not None else Prng(0)
    size = modules.noise_set.size
    if warm_start:
        modules = calibrate_predictor(model, modules, corpus, rng, seq_len=seq_len, mode=mode)
    ne, npred = _module_arrays(modules)
    ne = {k: np.array(v) for k, v in ne.items()}
    npred = {k: np.array(v) for k, v in npred.items()}
    opt = AdamW(lr)
    history = []
    corpus = np.asarray(corpus, dtype=np.int64)
    for step in range(steps):
        windows = sample_windows(corpus, batch, seq_len + 1, rng)
        ids = _draw_ids(rng, size, batch, seq_len, mode)
        tape = GradTape()
        ne_nodes = {k: tape.param(v, "ne." + k) for k, v in ne.items()}
        np_nodes = {k: tape.param(v, "np." + k) for k, v in npred.items()}
        total, *_ = noisy_objective(tape, model, ne_nodes, np_nodes, windows, ids, lam)
        loss = float(total.value)
        if not np.isfinite(loss):
            raise TrainingError(f"loss diverged at step {step}")
        grads = reverse_gradients(tape, total)
        params = {**{"ne." + k: v for k, v in ne.items()}, **{"np." + k: v for k, v in npred.items()}}
        params = opt.step(params, grads)
        ne = {k: params["ne." + k] for k in ne}
        npred = {k: params["np." + k] for k in npred}
        history.append(loss)
        if log is not None:
            log(step, loss)
    trained = _modules_from(ne, npred, model.hash)
    if heldout is None:
        return trained, ModuleMetrics(float("nan"), float("nan"), float("nan"), steps, tuple(history))
    lm, base, acc = evaluate_modules(model, trained, heldout, Prng(rng.next_u64()), mode)
    return trained, ModuleMetrics(lm, base, acc, steps, tuple(history))


# bounds --------------------------------------------------------------------

def completeness_bound(accuracies) -> float:
    """Honest-rejection probability ``1 - prod(acc_n)``."""
    accs = [float(a) for a in accuracies]
    if any(not 0.0 <= a <= 1.0 for a in accs):
        raise ValueError("accuracies must lie in [0, 1]")
    return 1.0 - prod(accs)


def soundness_bound(noise_set) -> float:
    """Per-position acceptance bound for a provider that did not run the model."""
    return 1.0 / _noise_set(noise_set).size


# files ---------------------------------------------------------------------

def save_modules(modules: NoiseModules, path):
    ne, npred = _module_arrays(modules)
    tensors = {**{"embedder." + k: v for k, v in ne.items()}, **{"predictor." + k: v for k, v in npred.items()}}
    return write_record(path, NOISE_MAGIC, {"base_model_sha256": modules.base_hash.hex(),
                                            "noise_set": modules.noise_set.size}, tensors)


def load_modules(path) -> NoiseModules:
    manifest, t = read_record(path, NOISE_MAGIC)
    try:
        ne = {k: t["embedder." + k] for k in ("noise_embedding", "weight", "bias")}
        npred = {k: t["predictor." + k] for k in ("weight", "bias")}
        base = bytes.fromhex(manifest["base_model_sha256"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"incomplete noise-module record: {exc}") from exc
    return _modules_from(ne, npred, base)
