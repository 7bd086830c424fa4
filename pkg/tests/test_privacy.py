import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from priveri.errors import CapabilityError, DimensionError
from priveri.model import forward_causal, perturb_low_rank
from priveri.numerics import Prng
from priveri.privacy import (ALL_STRATEGIES, AdversaryView, CacheGuess, Honest, PositionGuess, PrivacyMode,
                             RandomOutputs, SamplingTamper, SealedRequest, SubsetDrop, SubstituteModel,
                             available_strategies, make_view, run_generation, run_provider, runner_up,
                             strategy_from_name)
from priveri.protocol1 import (PositionSchedule, build_request, build_request_at, generate_cache,
                               pregenerate_schedule, run_request, verify, verify_greedy_sampling, verify_transcript)
from priveri.protocol2 import PER_POSITION, build_noisy_request, init_modules


@pytest.fixture(scope="module")
def cache(small_model):
    return generate_cache(small_model, 10, 3, Prng(0))


def view_for(req, mode, cache, model):
    return make_view(req, mode, cache, model.hash)


# views ------------------------------------------------------------------------

def test_views_ignore_hidden_fields(cache):
    a = build_request([1, 2, 3, 4], cache.sequences()[0], Prng(1))
    b = build_request([9, 9, 9, 9], cache.sequences()[1], Prng(2))
    assert a.sentinel_positions != b.sentinel_positions
    for mode in PrivacyMode:
        assert make_view(a, mode) == make_view(b, mode)
    assert make_view(a, "structural") != make_view(build_request([1, 2], cache.sequences()[0], Prng(1)), "structural")


def test_structural_exposes_slots_only(cache):
    req = build_request([1, 2, 3], cache.sequences()[0], Prng(1))
    s, o = make_view(req, "structural"), make_view(req, "opaque")
    assert s.slots == tuple(range(1, 7)) and o.slots is None
    assert s.total_length == o.total_length == 6
    fields = set(vars(s))
    assert not fields & {"mask2d", "tokens", "sentinel_positions", "sentinel_sequence", "noise_cache", "position_ids"}


def test_available_strategies():
    assert set(available_strategies("opaque")) == {"honest", "substitute", "cache_guess", "random_outputs",
                                                   "sampling_tamper"}
    assert set(available_strategies("structural")) == set(ALL_STRATEGIES) and len(ALL_STRATEGIES) == 7
    for mode in PrivacyMode:
        assert "cache_guess" in available_strategies(mode)


def test_capability_error(small_model, cache):
    req = build_request([1, 2, 3], cache.sequences()[0], Prng(1))
    view = view_for(req, "opaque", cache, small_model)
    for strat in (PositionGuess(), SubsetDrop(1)):
        with pytest.raises(CapabilityError):
            run_provider(strat, req, view, small_model, Prng(0))


def test_view_length_mismatch(small_model, cache):
    req = build_request([1, 2, 3], cache.sequences()[0], Prng(1))
    other = view_for(build_request([1], cache.sequences()[0], Prng(1)), "structural", cache, small_model)
    with pytest.raises(DimensionError):
        run_provider(Honest(), req, other, small_model, Prng(0))


# strategies -------------------------------------------------------------------

def test_honest_is_exact_forward(small_model, cache):
    req = build_request([5, 6, 7, 8, 9], cache.sequences()[2], Prng(3))
    resp = run_provider(Honest(), req, view_for(req, "opaque", cache, small_model), small_model, Prng(0))
    assert np.array_equal(resp.outputs, run_request(small_model, req).logits)
    assert verify(resp.outputs, req, cache, 0.0).per_sentinel_l1 == (0.0, 0.0, 0.0)
    assert resp.kind == "logits" and resp.label == "honest"


def test_substitute_rejected(small_model, cache):
    sub = perturb_low_rank(small_model, 31)
    req = build_request([5, 6, 7, 8, 9], cache.sequences()[2], Prng(3))
    resp = run_provider(SubstituteModel(sub, "lr31"), req, view_for(req, "opaque", cache, small_model), small_model,
                        Prng(0))
    assert resp.label == "substitute:lr31"
    assert not verify(resp.outputs, req, cache, 1e-6).verified


def test_position_guess_success_iff_slots_match(small_model, cache):
    seq = cache.sequences()[0]
    seen = {True: 0, False: 0}
    for seed in range(60):
        req = build_request([3, 4], seq, Prng(seed))
        resp = run_provider(PositionGuess(), req, view_for(req, "structural", cache, small_model), small_model,
                            Prng(1000 + seed))
        hit = resp.trace["slots"] == req.sentinel_positions
        seen[hit] += 1
        assert verify(resp.outputs, req, cache).verified == hit
    assert seen[True] > 0 and seen[False] > 0


def test_cache_guess_paste(small_model, cache):
    req = build_request([3, 4, 5], cache.sequences()[4], Prng(2))
    resp = run_provider(CacheGuess(), req, view_for(req, "opaque", cache, small_model), small_model, Prng(7))
    rows = resp.outputs[np.array(resp.trace["slots"]) - 1]
    assert np.array_equal(rows, cache.lookup(resp.trace["sequence"]))


def test_subset_drop_properties(small_model, cache):
    seq = cache.sequences()[1]
    prompt = [7, 3, 1, 8, 2, 5]
    for seed in range(40):
        req = build_request(prompt, seq, Prng(seed))
        resp = run_provider(SubsetDrop(1), req, view_for(req, "structural", cache, small_model), small_model,
                            Prng(500 + seed))
        (dropped,) = resp.trace["dropped"]
        sentinel_kept = dropped not in req.sentinel_positions
        assert verify(resp.outputs, req, cache).verified == sentinel_kept
        # kept original slots that precede the dropped slot still see their full causal prefix
        plain = forward_causal(small_model, prompt).logits
        for rank, slot in enumerate(req.original_positions):
            if slot < dropped:
                assert np.array_equal(resp.outputs[slot - 1], plain[rank])


def test_subset_drop_bounds(small_model, cache):
    req = build_request([1, 2], cache.sequences()[0], Prng(0))
    view = view_for(req, "structural", cache, small_model)
    with pytest.raises(ValueError):
        run_provider(SubsetDrop(5), req, view, small_model, Prng(0))


def test_random_outputs_shape(small_model, cache):
    req = build_request([1, 2], cache.sequences()[0], Prng(0))
    resp = run_provider(RandomOutputs(), req, view_for(req, "opaque", cache, small_model), small_model, Prng(0))
    assert resp.outputs.shape == (5, 32)
    assert not verify(resp.outputs, req, cache).verified


def test_runner_up():
    assert runner_up([0.0, 5.0, 3.0, 5.0]) == 3
    assert runner_up([2.0, 1.0, 1.0]) == 1


def test_sampling_tamper_claims_runner_up(small_model, cache):
    req = build_request([1, 2, 3], cache.sequences()[0], Prng(0))
    resp = run_provider(SamplingTamper(), req, view_for(req, "opaque", cache, small_model), small_model, Prng(0))
    assert np.array_equal(resp.outputs, run_request(small_model, req).logits)
    assert verify(resp.outputs, req, cache).verified
    row = resp.outputs[max(req.original_positions) - 1]
    assert resp.claimed_tokens == (runner_up(row),)
    sched = PositionSchedule(3, 3, (req.sentinel_positions,))
    assert verify_greedy_sampling([resp.outputs], resp.claimed_tokens, sched).first_failure == 1


def test_sampling_tamper_generation_caught_at_step(small_model, cache):
    seq = cache.sequences()[0]
    for seed in range(10):
        sched = pregenerate_schedule(3, 3, 6, Prng(seed))
        resp = run_generation(SamplingTamper(), small_model, [1, 2, 3], seq, sched, 6, "opaque", Prng(seed), cache)
        gen = resp.generation
        assert verify_transcript(gen.transcript, sched, cache, seq).verified
        check = verify_greedy_sampling(gen.transcript, gen.tokens, sched)
        assert not check.verified and check.first_failure == resp.trace["step"]
        honest = run_generation(Honest(), small_model, [1, 2, 3], seq, sched, 6, "opaque", Prng(seed), cache)
        assert verify_greedy_sampling(honest.generation.transcript, honest.generation.tokens, sched).verified


def test_protocol2_outputs_hidden(small_model, cache):
    mods = init_modules(small_model, 8)
    req = build_noisy_request([1, 2, 3], cache.sequences()[0], mods, small_model, Prng(0), PER_POSITION)
    view = view_for(req, "structural", cache, small_model)
    assert view.protocol == 2
    for name in available_strategies("structural"):
        strat = strategy_from_name(name, 1, small_model)
        resp = run_provider(strat, req, view, small_model, Prng(0))
        assert resp.kind == "hidden" and resp.outputs.shape == (6, 32) and resp.claimed_tokens == ()


def test_strategy_from_name():
    assert isinstance(strategy_from_name("subset_drop", 3), SubsetDrop)
    assert strategy_from_name("subset_drop", 3).label == "subset_drop:3"
    with pytest.raises(ValueError):
        strategy_from_name("substitute")
    with pytest.raises(ValueError):
        strategy_from_name("nope")


# paired-request discipline ----------------------------------------------------

@given(st.integers(1, 12), st.integers(0, 2**32), st.integers(0, 2**32),
       st.sampled_from(["position_guess", "cache_guess", "subset_drop", "random_outputs"]))
@settings(max_examples=60, deadline=None)
def test_identical_views_identical_decisions(small_model, cache, N, s1, s2, name):
    r1, r2 = Prng(s1), Prng(s2)
    a = build_request([r1.below(32) for _ in range(N)], cache.sequences()[r1.below(10)], r1)
    b = build_request([r2.below(32) for _ in range(N)], cache.sequences()[r2.below(10)], r2)
    va, vb = (view_for(r, "structural", cache, small_model) for r in (a, b))
    assert va == vb
    strat = strategy_from_name(name, 2)
    ra = run_provider(strat, a, va, small_model, Prng(77))
    rb = run_provider(strat, b, vb, small_model, Prng(77))
    assert ra.trace == rb.trace
    computed = set()
    for key in ("slots", "dropped"):
        if key in ra.trace and name != "subset_drop":
            computed |= set(ra.trace[key])
    if name == "subset_drop":
        computed = set(range(1, a.length + 1)) - set(ra.trace["dropped"])
    noise_rows = [s - 1 for s in range(1, a.length + 1) if s not in computed]
    assert np.array_equal(ra.outputs[noise_rows], rb.outputs[noise_rows])


def test_sealed_subset_uses_original_position_ids(small_model, cache):
    req = build_request_at([4, 5, 6], cache.sequences()[0], [1, 2, 3])
    sealed = SealedRequest(req)
    out = sealed.evaluate_subset(small_model, [4, 5, 6])
    assert np.array_equal(out, forward_causal(small_model, [4, 5, 6]).logits)
    assert isinstance(make_view(req, "opaque"), AdversaryView)
