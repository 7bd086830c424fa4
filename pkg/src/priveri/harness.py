"""Monte Carlo attack experiments, analytic bounds and the fingerprint study."""
from __future__ import annotations

import hashlib
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from .errors import CapabilityError, ContractError
from .model import ModelParams, causal_mask, decoder, init_params, perturb_finetune_step, perturb_low_rank
from .model import perturb_quantize
from .model.train import pretrain
from .corpus import sample_windows
from .numerics import Prng, matmul
from .numerics.autodiff import EagerOps
from .privacy import PrivacyMode, available_strategies, make_view, run_generation, run_provider, strategy_from_name
from .protocol1 import (DEFAULT_TOL, SentinelCache, build_request, pregenerate_schedule, verify,
                        verify_greedy_sampling, verify_transcript)
from .protocol2 import PER_POSITION, SHARED, NoiseModules, build_noisy_request, verify_noisy

# analytic bounds ------------------------------------------------------------

BOUND_KINDS = ("cache_guess", "position_guess", "subset_leave_one_out", "subset_drop", "noise_per_position",
               "noise_sequence", "completeness")


def binomial(n: int, k: int) -> int:
    if k < 0 or k > n:
        return 0
    return math.comb(n, k)


def analytic_fraction(kind: str, **p) -> Fraction:
    """Exact attack or rejection probability as a rational number."""
    if kind == "cache_guess":
        return Fraction(1, _pos(p["cache_size"], "cache_size"))
    if kind == "position_guess":
        N, K = _pos(p["N"], "N"), _pos(p["K"], "K")
        return Fraction(1, binomial(N + K, K))
    if kind == "subset_leave_one_out":
        N, K = _pos(p["N"], "N"), _pos(p["K"], "K")
        return Fraction(N, N + K)
    if kind == "subset_drop":
        N, K, k = _pos(p["N"], "N"), _pos(p["K"], "K"), _pos(p["k"], "k")
        return Fraction(binomial(N, k), binomial(N + K, k))
    if kind == "noise_per_position":
        return Fraction(1, _pos(p["noise_set"], "noise_set"))
    if kind == "noise_sequence":
        return Fraction(1, _pos(p["noise_set"], "noise_set")) ** _pos(p["N"], "N")
    if kind == "completeness":
        prod = Fraction(1)
        for a in p["accuracies"]:
            a = Fraction(a)
            if not 0 <= a <= 1:
                raise ValueError("accuracies must lie in [0, 1]")
            prod *= a
        return 1 - prod
    raise ValueError(f"unknown bound kind {kind!r}; expected one of {', '.join(BOUND_KINDS)}")


def _pos(v, name):
    v = int(v)
    if v < 1:
        raise ValueError(f"{name} must be >= 1")
    return v


def analytic_attack_probability(kind: str, **params) -> float:
    return float(analytic_fraction(kind, **params))


def comm_overhead_bytes(L: int, b: int) -> int:
    """Bytes exchanged for a length-L request at b bytes per element."""
    L, b = int(L), int(b)
    if L < 1 or b < 1:
        raise ValueError("L and b must be >= 1")
    return b * (L * L + 8 * L + 15)


def standard_error(p: float, n: int) -> float:
    if n < 1:
        raise ValueError("n must be >= 1")
    return math.sqrt(max(p * (1.0 - p), 0.0) / n)


def standard_error_band(p_hat: float, n: int, p: float, k_sigma: float = 3.0) -> bool:
    """``|p_hat - p| <= k * sqrt(p (1 - p) / n)``, SE taken at the analytic p."""
    return abs(p_hat - p) <= k_sigma * standard_error(p, n)


# seeding --------------------------------------------------------------------

def trial_seeds(master_seed: int, index: int) -> tuple[int, int]:
    """User and provider seeds for one trial: SHA-256(master || index) cut in 64-bit pieces."""
    d = hashlib.sha256(int(master_seed).to_bytes(8, "little", signed=False)
                       + int(index).to_bytes(8, "little", signed=False)).digest()
    return int.from_bytes(d[:8], "little"), int.from_bytes(d[8:16], "little")


# experiments ----------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentSpec:
    protocol: int = 1
    strategy: str = "honest"
    mode: str = "structural"
    N: int = 14
    K: int = 3
    cache_size: int = 100
    noise_set: int = 16
    trials: int = 1000
    seed: int = 0
    tol: float = DEFAULT_TOL
    drop: int = 1  # slots skipped by subset_drop
    noise_mode: str = SHARED
    steps: int = 4  # generation length for sampling_tamper
    substitute: str = ""  # key into the context's substitute models

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.protocol not in (1, 2):
            raise ValueError("protocol must be 1 or 2")
        if self.N < 1 or self.K < 1:
            raise ValueError("N and K must be >= 1")
        PrivacyMode(self.mode)
        if self.noise_mode not in (SHARED, PER_POSITION):
            raise ValueError(f"unknown noise mode {self.noise_mode!r}")


@dataclass
class ExperimentContext:
    """Public artifacts every trial needs."""

    model: ModelParams
    cache: SentinelCache
    modules: NoiseModules | None = None
    substitutes: dict = field(default_factory=dict)


@dataclass(frozen=True)
class TrialOutcome:
    verified: bool  # the provider's response passed verification
    event: bool  # the attack event the analytic bound describes
    positions: int = 0  # protocol 2: noised positions checked
    matches: int = 0  # protocol 2: of those, predicted correctly
    noise_all: bool = False  # protocol 2: every noise prediction matched


_CTX: ExperimentContext | None = None


def _init_worker(ctx):
    global _CTX
    _CTX = ctx


def _strategy(spec: ExperimentSpec, ctx: ExperimentContext):
    sub = ctx.substitutes.get(spec.substitute) if spec.strategy == "substitute" else None
    if spec.strategy == "substitute" and sub is None:
        raise ContractError(f"no substitute model named {spec.substitute!r}")
    return strategy_from_name(spec.strategy, k=spec.drop, substitute=sub, substitute_name=spec.substitute)


def run_trial(spec: ExperimentSpec, ctx: ExperimentContext, index: int) -> TrialOutcome:
    user_seed, provider_seed = trial_seeds(spec.seed, index)
    user, provider = Prng(user_seed), Prng(provider_seed)
    model, cache = ctx.model, ctx.cache
    V = model.config.vocab_size
    prompt = [user.below(V) for _ in range(spec.N)]
    seqs = cache.sequences()
    sentinel = seqs[user.below(len(seqs))]
    strategy = _strategy(spec, ctx)

    if spec.strategy == "sampling_tamper":
        schedule = pregenerate_schedule(spec.N, cache.K, spec.steps, user)
        resp = run_generation(strategy, model, prompt, sentinel, schedule, spec.steps, spec.mode, provider, cache)
        gen = resp.generation
        sentinels_ok = verify_transcript(gen.transcript, schedule, cache, sentinel, spec.tol).verified
        sampling = verify_greedy_sampling(gen.transcript, gen.tokens, schedule)
        caught_at_step = sampling.first_failure == resp.trace.get("step")
        return TrialOutcome(sentinels_ok and sampling.verified, caught_at_step)

    if spec.protocol == 1:
        request = build_request(prompt, sentinel, user)
    else:
        if ctx.modules is None:
            raise ContractError("protocol 2 experiments need noise modules")
        request = build_noisy_request(prompt, sentinel, ctx.modules, model, user, spec.noise_mode)
    view = make_view(request, spec.mode, cache, model.hash)
    resp = run_provider(strategy, request, view, model, provider)

    if spec.protocol == 1:
        ok = verify(resp.outputs, request, cache, spec.tol).verified
        return TrialOutcome(ok, _event(spec, resp.trace, request, ok))
    res = verify_noisy(resp.outputs, request, cache, ctx.modules, model, spec.tol)
    m = res.noise_matches
    return TrialOutcome(res.verified, _event(spec, resp.trace, request.base, res.verified), len(m), sum(m), all(m))


def _event(spec, trace, request, verified):
    # guessing attacks are scored on the guess itself; the bound is about the guess
    if spec.strategy == "position_guess":
        return tuple(trace["slots"]) == tuple(request.sentinel_positions)
    if spec.strategy == "cache_guess":
        return tuple(trace["sequence"]) == tuple(request.sentinel_sequence)
    return verified


def _run_block(args):
    spec, start, stop = args
    return [run_trial(spec, _CTX, i) for i in range(start, stop)]


def run_trials(spec: ExperimentSpec, ctx: ExperimentContext, workers: int = 1, chunk: int | None = None):
    """Per-trial outcomes in trial-index order."""
    n = spec.trials
    if workers <= 1:
        return [run_trial(spec, ctx, i) for i in range(n)]
    chunk = chunk or max(1, math.ceil(n / (workers * 4)))
    blocks = [(spec, s, min(n, s + chunk)) for s in range(0, n, chunk)]
    out = []
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(ctx,)) as pool:
        for part in pool.map(_run_block, blocks):
            out.extend(part)
    return out


@dataclass
class ExperimentReport:
    spec: dict
    rate: float
    trials: int
    se: float
    bound: float | None
    bound_kind: str  # "exact" | "upper" | "none"
    formula: str
    within_3_sigma: bool | None
    verified_rate: float
    extra: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def to_dict(self, wall_clock: bool = True) -> dict:
        d = asdict(self)
        if not wall_clock:
            d.pop("wall_clock")
        return d

    def to_json(self, wall_clock: bool = True) -> str:
        return json.dumps(self.to_dict(wall_clock), indent=2, sort_keys=True)


def _bound_for(spec: ExperimentSpec):
    s = spec.strategy
    if s == "honest":
        return 1.0, "exact", "honest pass rate = 1"
    if s == "position_guess":
        return analytic_attack_probability("position_guess", N=spec.N, K=spec.K), "exact", "1 / C(N+K, K)"
    if s == "cache_guess":
        return analytic_attack_probability("cache_guess", cache_size=spec.cache_size), "exact", "1 / |C|"
    if s == "subset_drop":
        if spec.drop == 1:
            return analytic_attack_probability("subset_leave_one_out", N=spec.N, K=spec.K), "exact", "N / (N+K)"
        return (analytic_attack_probability("subset_drop", N=spec.N, K=spec.K, k=spec.drop), "exact",
                "C(N, k) / C(N+K, k)")
    if s == "sampling_tamper":
        return 1.0, "exact", "detected at the tampered step with probability 1"
    if s == "random_outputs":
        return 0.0, "exact", "continuous noise never matches the cache"
    return None, "none", ""


def summarize(spec: ExperimentSpec, outcomes, wall_clock: float = 0.0) -> ExperimentReport:
    n = len(outcomes)
    events = sum(o.event for o in outcomes)
    passed = sum(o.verified for o in outcomes)
    rate = events / n
    bound, kind, formula = _bound_for(spec)
    within = None
    if kind == "exact":
        within = standard_error_band(rate, n, bound, 3.0)
    extra = {}
    if spec.protocol == 2:
        positions = sum(o.positions for o in outcomes)
        matches = sum(o.matches for o in outcomes)
        acc = matches / positions if positions else 0.0
        seq_rate = sum(o.noise_all for o in outcomes) / n
        # sequences of N noised positions; the bound assumes independent positions
        per_pos_bound = 1.0 / spec.noise_set
        seq_upper = (per_pos_bound + 3.0 * standard_error(per_pos_bound, max(positions, 1))) ** spec.N
        extra = {
            "noise_positions": positions,
            "position_rate": acc,
            "position_se": standard_error(acc, max(positions, 1)),
            "noise_sequence_rate": seq_rate,
            "noise_sequence_rejection_rate": 1.0 - seq_rate,
            "completeness_prediction": 1.0 - acc ** spec.N,
            "noise_mode": spec.noise_mode,
        }
        if spec.strategy == "honest":
            p = extra["completeness_prediction"]
            extra["completeness_within_3_sigma"] = standard_error_band(1.0 - seq_rate, n, p, 3.0)
        else:
            extra["position_bound"] = per_pos_bound
            extra["position_within_3_sigma"] = standard_error_band(acc, max(positions, 1), per_pos_bound, 3.0)
            extra["noise_sequence_upper"] = seq_upper
            extra["noise_sequence_within_bound"] = seq_rate <= seq_upper
        if spec.strategy == "honest":
            # honest noise misses make the full check fail, so the pass rate is 1 - rejection
            bound, kind, formula = 1.0 - extra["completeness_prediction"], "exact", "prod acc_n"
            within = standard_error_band(rate, n, bound, 3.0)
    return ExperimentReport(asdict(spec), rate, n, standard_error(rate, n), bound, kind, formula, within,
                            passed / n, extra, wall_clock)


def run_attack_experiment(spec: ExperimentSpec, ctx: ExperimentContext, workers: int = 1) -> ExperimentReport:
    t0 = time.perf_counter()
    if spec.strategy not in available_strategies(spec.mode):
        raise CapabilityError(f"{spec.strategy} is not available in opaque mode")
    if spec.K != ctx.cache.K or spec.cache_size != len(ctx.cache):
        raise ContractError(f"spec asks for K={spec.K}, |C|={spec.cache_size}; cache has K={ctx.cache.K}, "
                            f"|C|={len(ctx.cache)}")
    outcomes = run_trials(spec, ctx, workers)
    return summarize(spec, outcomes, time.perf_counter() - t0)


# fingerprint study ----------------------------------------------------------

def batch_fingerprints(model: ModelParams, sequences) -> np.ndarray:
    """Fingerprints of many length-K sequences in one batched pass, shape (n, K*V)."""
    seqs = np.asarray(sequences, dtype=np.int64)
    n, K = seqs.shape
    x = model["token_embedding"][seqs]
    pos = np.broadcast_to(np.arange(1, K + 1), (n, K))
    hidden = decoder(EagerOps, model.tensors, model.config, x, causal_mask(K), pos)
    return matmul(hidden, model["unembedding"]).reshape(n, -1)


def random_sequences(n: int, K: int, V: int, rng: Prng) -> list[tuple]:
    """``n`` distinct uniformly drawn token sequences."""
    if n > V ** K:
        raise ValueError("more sequences requested than exist")
    seen, out = set(), []
    while len(out) < n:
        s = tuple(rng.below(V) for _ in range(K))
        if s not in seen:
            seen.add(s)
            out.append(s)
    return out


def _l1_rows(a, b):
    return np.abs(a - b).sum(axis=1)


def nearest_neighbour_min(fps: np.ndarray, block: int = 256) -> float:
    """Smallest L1 distance between fingerprints of distinct sequences."""
    best = np.inf
    n = len(fps)
    for i in range(0, n, block):
        a = fps[i: i + block]
        d = np.abs(a[:, None, :] - fps[None, :, :]).sum(axis=2)
        for r in range(len(a)):
            d[r, i + r] = np.inf
        best = min(best, float(d.min()))
    return best


@dataclass(frozen=True)
class StudyRow:
    name: str
    min_distance: float
    median_distance: float
    max_distance: float


@dataclass(frozen=True)
class FingerprintTable:
    rows: tuple
    honest_distance: float
    intra_model_min: float
    n_sequences: int
    K: int

    def row(self, name) -> StudyRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self):
        return {"n_sequences": self.n_sequences, "K": self.K, "honest_distance": self.honest_distance,
                "intra_model_min": self.intra_model_min, "rows": [asdict(r) for r in self.rows]}


def fingerprint_study(base: ModelParams, perturbations, n_sequences: int, K: int, rng: Prng) -> FingerprintTable:
    """Separation between the base model and each ``(name, params)`` perturbation."""
    if n_sequences < 1:
        raise ValueError("n_sequences must be >= 1")
    seqs = random_sequences(n_sequences, K, base.config.vocab_size, rng)
    ref = batch_fingerprints(base, seqs)
    again = batch_fingerprints(base, seqs)
    honest = float(_l1_rows(ref, again).max())
    rows = []
    for name, params in perturbations:
        d = _l1_rows(ref, batch_fingerprints(params, seqs))
        rows.append(StudyRow(name, float(d.min()), float(np.median(d)), float(d.max())))
    intra = nearest_neighbour_min(ref) if n_sequences > 1 else float("nan")
    return FingerprintTable(tuple(rows), honest, intra, n_sequences, K)


def default_perturbations(base: ModelParams, corpus, seed: int = 0, pretrain_steps: int = 200,
                          ranks=None, finetune_lr: float = 1e-3, batch: int = 8, seq_len: int = 32):
    """Low-rank (r=1, d/2, d-1), 8-bit quantized, one fine-tune step, different seed."""
    d = base.config.embed_dim
    ranks = ranks or (1, d // 2, d - 1)
    out = [(f"low_rank_r{r}", perturb_low_rank(base, r)) for r in ranks]
    out.append(("quantized_8bit", perturb_quantize(base, 8)))
    rng = Prng(seed)
    out.append(("finetune_step", perturb_finetune_step(base, sample_windows(corpus, batch, seq_len + 1, rng),
                                                       finetune_lr)))
    other = pretrain(init_params(base.config, seed + 1), corpus, pretrain_steps, seed=seed + 1)
    out.append(("different_seed", other))
    return out
