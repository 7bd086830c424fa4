"""Simulated privacy gadget and the provider strategy suite.

Nothing is encrypted. Secrecy is an information-flow rule instead: a
strategy decides what to do from its :class:`AdversaryView` and its rng
alone, and touches the request only through :class:`SealedRequest`, whose
methods stand in for computation under encryption.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import CapabilityError, DimensionError
from .model import ModelParams, causal_mask, forward
from .numerics import Prng, argmax_lowest, sample_without_replacement
from .protocol1 import AugmentedGeneration, AugmentedRequest, SentinelCache, generate_augmented, last_original_row
from .protocol2 import NoisyRequest


class PrivacyMode(str, enum.Enum):
    STRUCTURAL = "structural"  # slots and shapes visible, values hidden
    OPAQUE = "opaque"  # only the total length is visible


@dataclass(frozen=True, eq=False)
class AdversaryView:
    """What the provider learns about a request, plus public artifacts."""

    total_length: int
    mode: PrivacyMode
    protocol: int
    slots: tuple | None = None  # 1..L in structural mode
    cache: SentinelCache | None = field(default=None, compare=False)
    model_hash: bytes = b""

    def key(self):
        return (self.total_length, self.mode, self.protocol, self.slots, self.model_hash)

    def __eq__(self, other):
        return isinstance(other, AdversaryView) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())


def make_view(request, mode, cache: SentinelCache | None = None, model_hash: bytes = b"") -> AdversaryView:
    """Project a request onto what the provider may observe."""
    mode = PrivacyMode(mode)
    L = request.length
    protocol = 2 if isinstance(request, NoisyRequest) else 1
    slots = tuple(range(1, L + 1)) if mode is PrivacyMode.STRUCTURAL else None
    return AdversaryView(L, mode, protocol, slots, cache, model_hash)


class SealedRequest:
    """Handle to a request the provider can compute on but not read."""

    def __init__(self, request):
        self._request = request
        self._noisy = isinstance(request, NoisyRequest)
        self._base: AugmentedRequest = request.base if self._noisy else request

    @property
    def length(self) -> int:
        return self._base.length

    def output_width(self, model: ModelParams) -> int:
        return model.config.hidden_dim if self._noisy else model.config.vocab_size

    def _inputs(self, model, rows=None):
        if self._noisy:
            emb = self._request.embeddings
            return emb if rows is None else emb[np.asarray(rows)]
        toks = list(self._base.tokens)
        return toks if rows is None else [toks[r] for r in rows]

    def _pick(self, out):
        return out.hidden if self._noisy else out.logits

    def evaluate(self, model: ModelParams) -> np.ndarray:
        """The full computation a provider is paid to run."""
        return self._pick(forward(model, self._inputs(model), self._base.mask2d, list(self._base.position_ids)))

    def evaluate_standalone(self, model: ModelParams, slots) -> np.ndarray:
        """Causal run over the given slots alone, position ids 1..k."""
        rows = [s - 1 for s in slots]
        k = len(rows)
        return self._pick(forward(model, self._inputs(model, rows), causal_mask(k), list(range(1, k + 1))))

    def evaluate_subset(self, model: ModelParams, kept) -> np.ndarray:
        """Run on the kept slots with the mask restricted to them."""
        rows = np.asarray([s - 1 for s in kept])
        sub = self._base.mask2d[np.ix_(rows, rows)]
        pos = [self._base.position_ids[r] for r in rows]
        return self._pick(forward(model, self._inputs(model, rows), sub, pos))


def standalone_outputs(model: ModelParams, sequence, hidden: bool) -> np.ndarray:
    """Causal run on a public token sequence (e.g. a cache entry)."""
    k = len(sequence)
    out = forward(model, list(sequence), causal_mask(k), list(range(1, k + 1)))
    return out.hidden if hidden else out.logits


def _noise_rows(rng: Prng, rows: int, width: int) -> np.ndarray:
    return rng.normal_array(rows * width).reshape(rows, width)


@dataclass(frozen=True)
class ProviderResponse:
    outputs: np.ndarray  # (L, V) logits or (L, d_h) hidden states
    kind: str  # "logits" | "hidden"
    label: str  # harness bookkeeping only
    claimed_tokens: tuple = ()
    trace: dict = field(default_factory=dict)  # the strategy's random decisions


# strategies -----------------------------------------------------------------

class Strategy:
    label = "strategy"
    structural_only = False

    def respond(self, sealed: SealedRequest, view: AdversaryView, model: ModelParams, rng: Prng):
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class Honest(Strategy):
    label = "honest"

    def respond(self, sealed, view, model, rng):
        return sealed.evaluate(model), {}


@dataclass(frozen=True, eq=False)
class SubstituteModel(Strategy):
    """Serve a cheaper or different model in place of the agreed one."""

    params: ModelParams = None
    name: str = "substitute"

    @property
    def label(self):
        return f"substitute:{self.name}"

    def respond(self, sealed, view, model, rng):
        return sealed.evaluate(self.params), {"model": self.name}


@dataclass(frozen=True, eq=False)
class PositionGuess(Strategy):
    """Guess the sentinel slots, compute only those, fill the rest with noise."""

    label = "position_guess"
    structural_only = True

    def respond(self, sealed, view, model, rng):
        K = view.cache.K
        guess = sample_without_replacement(view.total_length, K, rng)
        out = _noise_rows(rng, view.total_length, sealed.output_width(model))
        out[np.array(guess) - 1] = sealed.evaluate_standalone(model, guess)
        return out, {"slots": tuple(guess)}


@dataclass(frozen=True, eq=False)
class CacheGuess(Strategy):
    """Guess the cache entry and its slots; noise everywhere else."""

    label = "cache_guess"

    def respond(self, sealed, view, model, rng):
        seqs = view.cache.sequences()
        index = rng.below(len(seqs))
        guess = sample_without_replacement(view.total_length, view.cache.K, rng)
        hidden = view.protocol == 2
        out = _noise_rows(rng, view.total_length, sealed.output_width(model))
        rows = standalone_outputs(model, seqs[index], hidden) if hidden else view.cache.lookup(seqs[index])
        out[np.array(guess) - 1] = rows
        return out, {"sequence": seqs[index], "slots": tuple(guess)}


@dataclass(frozen=True, eq=False)
class SubsetDrop(Strategy):
    """Skip ``k`` slots, run the rest, and fill the skipped rows with noise."""

    k: int = 1
    structural_only = True

    @property
    def label(self):
        return f"subset_drop:{self.k}"

    def respond(self, sealed, view, model, rng):
        L = view.total_length
        if not 0 < self.k < L:
            raise ValueError(f"cannot drop {self.k} of {L} slots")
        dropped = set(sample_without_replacement(L, self.k, rng))
        kept = [s for s in range(1, L + 1) if s not in dropped]
        out = _noise_rows(rng, L, sealed.output_width(model))
        out[np.array(kept) - 1] = sealed.evaluate_subset(model, kept)
        return out, {"dropped": tuple(sorted(dropped))}


@dataclass(frozen=True, eq=False)
class RandomOutputs(Strategy):
    label = "random_outputs"

    def respond(self, sealed, view, model, rng):
        return _noise_rows(rng, view.total_length, sealed.output_width(model)), {}


@dataclass(frozen=True, eq=False)
class SamplingTamper(Strategy):
    """Honest logits, but one claimed token is the runner-up instead of the argmax."""

    label = "sampling_tamper"

    def respond(self, sealed, view, model, rng):
        return sealed.evaluate(model), {"step": 1}


ALL_STRATEGIES = ("honest", "substitute", "position_guess", "cache_guess", "subset_drop", "random_outputs",
                  "sampling_tamper")
_STRUCTURAL_ONLY = {"position_guess", "subset_drop"}


def available_strategies(mode) -> list[str]:
    mode = PrivacyMode(mode)
    if mode is PrivacyMode.STRUCTURAL:
        return list(ALL_STRATEGIES)
    return [s for s in ALL_STRATEGIES if s not in _STRUCTURAL_ONLY]


def runner_up(row) -> int:
    """Second choice under the lowest-index argmax rule."""
    row = np.asarray(row, dtype=np.float64)
    best = argmax_lowest(row)
    masked = row.copy()
    masked[best] = -np.inf
    return argmax_lowest(masked)


def run_provider(strategy: Strategy, request, view: AdversaryView, model: ModelParams, rng: Prng) -> ProviderResponse:
    """Let ``strategy`` answer ``request``; it only ever sees ``view`` and a sealed handle."""
    if strategy.structural_only and view.mode is not PrivacyMode.STRUCTURAL:
        raise CapabilityError(f"{strategy.label} needs structural visibility, view is {view.mode.value}")
    if view.total_length != request.length:
        raise DimensionError("view does not belong to this request")
    sealed = SealedRequest(request)
    outputs, trace = strategy.respond(sealed, view, model, rng)
    outputs = np.asarray(outputs, dtype=np.float64)
    if outputs.shape[0] != request.length:
        raise DimensionError("provider output rows do not match request length")
    kind = "hidden" if isinstance(request, NoisyRequest) else "logits"
    claimed = ()
    if kind == "logits":
        row = last_original_row(outputs, request.sentinel_positions)
        pick = runner_up if isinstance(strategy, SamplingTamper) else argmax_lowest
        claimed = (pick(row),)
    return ProviderResponse(outputs, kind, strategy.label, claimed, trace)


@dataclass(frozen=True)
class GenerationResponse:
    generation: AugmentedGeneration
    label: str
    trace: dict


def run_generation(strategy: Strategy, model: ModelParams, prompt, sentinel_sequence, schedule, n_steps: int,
                   mode, rng: Prng, cache: SentinelCache | None = None) -> GenerationResponse:
    """Non-interactive generation served by ``strategy``.

    SamplingTamper answers every step honestly and swaps in the runner-up
    token at one step drawn uniformly from ``1..n_steps``.
    """
    mode = PrivacyMode(mode)
    trace = {}
    sampler = None
    if isinstance(strategy, SamplingTamper):
        step = 1 + rng.below(n_steps)
        trace["step"] = step

        def sampler(i, row):
            return runner_up(row) if i == step else argmax_lowest(row)

        responder = None
    else:
        def responder(req):
            view = make_view(req, mode, cache, model.hash)
            return run_provider(strategy, req, view, model, rng).outputs

    gen = generate_augmented(model, prompt, sentinel_sequence, schedule, n_steps, responder, sampler)
    return GenerationResponse(gen, strategy.label, trace)


def strategy_from_name(name: str, k: int = 1, substitute: ModelParams | None = None,
                       substitute_name: str = "substitute") -> Strategy:
    if name == "honest":
        return Honest()
    if name == "substitute":
        if substitute is None:
            raise ValueError("substitute strategy needs a model")
        return SubstituteModel(substitute, substitute_name)
    if name == "position_guess":
        return PositionGuess()
    if name == "cache_guess":
        return CacheGuess()
    if name == "subset_drop":
        return SubsetDrop(k)
    if name == "random_outputs":
        return RandomOutputs()
    if name == "sampling_tamper":
        return SamplingTamper()
    raise ValueError(f"unknown strategy {name!r}")


__all__ = [
    "PrivacyMode", "AdversaryView", "make_view", "SealedRequest", "ProviderResponse", "Strategy", "Honest",
    "SubstituteModel", "PositionGuess", "CacheGuess", "SubsetDrop", "RandomOutputs", "SamplingTamper",
    "available_strategies", "run_provider", "run_generation", "GenerationResponse", "runner_up",
    "strategy_from_name", "standalone_outputs",
]
