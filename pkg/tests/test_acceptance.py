"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the summary block at the end
of the session lists every criterion with its measured numbers.
"""
import math

import numpy as np
import pytest

from test_protocol2 import objective_check

from priveri.errors import IntegrityError
from priveri.exchange import load_request, load_response, save_request, save_response
from priveri.harness import (ExperimentContext, ExperimentSpec, comm_overhead_bytes, default_perturbations,
                             fingerprint_study, run_attack_experiment)
from priveri.model import forward_causal, load_model, log_loss, save_model
from priveri.numerics import Prng
from priveri.privacy import Honest, make_view, run_provider
from priveri.protocol1 import (build_request, decode_cache, encode_cache, generate_augmented, load_cache,
                               pregenerate_schedule, run_request, save_cache, verify, verify_greedy_sampling,
                               verify_transcript)
from priveri.protocol2 import PER_POSITION, SHARED, build_noisy_request, load_modules, save_modules
from priveri.records import blob_path

# master seeds for protocol 1, protocol 2 and generation experiments
SEED_P1, SEED_P2, SEED_GEN = 2024, 7, 99


@pytest.fixture(scope="module")
def cases(base_model, cache):
    """The 1000 shared cases for criteria 1 and 2: (prompt, sentinel sequence, request)."""
    rng = Prng(SEED_P1)
    seqs = cache.sequences()
    out = []
    for _ in range(1000):
        N = 1 + rng.below(64)
        prompt = [rng.below(64) for _ in range(N)]
        seq = seqs[rng.below(len(seqs))]
        out.append((prompt, seq, build_request(prompt, seq, rng)))
    return out


@pytest.fixture(scope="module")
def augmented_logits(base_model, cases):
    return [run_request(base_model, req).logits for _, _, req in cases]


@pytest.fixture(scope="module")
def ctx(base_model, cache):
    return ExperimentContext(base_model, cache)


@pytest.fixture(scope="module")
def ctx2(base_model, cache, trained_modules):
    return ExperimentContext(base_model, cache, trained_modules[0])


def test_c01_non_interference(accept, base_model, cases, augmented_logits):
    bad = 0
    for (prompt, _, req), logits in zip(cases, augmented_logits):
        plain = forward_causal(base_model, prompt).logits
        bad += not np.array_equal(logits[np.array(req.original_positions) - 1], plain)
    accept(1, "non-interference", bad == 0, f"{1000 - bad}/1000 cases bit-exact")


def test_c02_sentinel_in_situ(accept, cache, cases, augmented_logits):
    exact = dist_zero = 0
    for (_, seq, req), logits in zip(cases, augmented_logits):
        exact += np.array_equal(logits[np.array(req.sentinel_positions) - 1], cache.lookup(seq))
        res = verify(logits, req, cache, tol=1e-9)
        dist_zero += res.verified and max(res.per_sentinel_l1) == 0.0
    accept(2, "sentinel in-situ cache match", exact == 1000 and dist_zero == 1000,
           f"{exact}/1000 bit-exact, {dist_zero}/1000 verified at distance 0.0")


@pytest.mark.slow
def test_c03_position_guess(accept, ctx):
    r = run_attack_experiment(ExperimentSpec(strategy="position_guess", N=14, K=3, trials=10**6, seed=SEED_P1), ctx)
    accept(3, "position-guess attack", r.within_3_sigma and r.bound == pytest.approx(1 / 680),
           f"rate {r.rate:.4e} vs 1/680={r.bound:.4e}, se {r.se:.2e}, {r.wall_clock:.0f}s")


@pytest.mark.slow
@pytest.mark.parametrize("N", [14, 128])
def test_c04_leave_one_out(accept, ctx, N):
    r = run_attack_experiment(ExperimentSpec(strategy="subset_drop", N=N, K=3, trials=10**5, seed=SEED_P1), ctx)
    ok = r.within_3_sigma and r.bound == pytest.approx(N / (N + 3))
    accept(4, f"leave-one-out subsetting N={N}", ok,
           f"rate {r.rate:.4f} vs {N}/{N + 3}={r.bound:.4f}, se {r.se:.1e}, {r.wall_clock:.0f}s")


@pytest.mark.slow
def test_c05_cache_guess(accept, ctx):
    r = run_attack_experiment(ExperimentSpec(strategy="cache_guess", N=14, trials=10**5, seed=SEED_P1), ctx)
    accept(5, "cache guessing", r.within_3_sigma and r.bound == 0.01,
           f"rate {r.rate:.4f} vs 0.01, se {r.se:.1e}")


@pytest.mark.slow
def test_c06_separability(accept, base_model, corpus):
    _, train, _ = corpus
    perts = default_perturbations(base_model, train, seed=0, pretrain_steps=200, finetune_lr=1e-3)
    t = fingerprint_study(base_model, perts, 1000, 3, Prng(SEED_P1))
    mins = {r.name: r.min_distance for r in t.rows}
    named = ["low_rank_r63", "quantized_8bit", "finetune_step", "different_seed"]
    ok = (t.honest_distance == 0.0 and all(mins[n] > 1e-3 for n in named)
          and mins["low_rank_r1"] >= mins["low_rank_r32"] >= mins["low_rank_r63"])
    detail = ", ".join(f"{n}={v:.3g}" for n, v in mins.items())
    accept(6, "separability", ok, f"honest {t.honest_distance}; min L1 {detail}")


@pytest.mark.slow
def test_c07_protocol2_training(accept, trained_modules):
    _, m = trained_modules
    ok = m.noise_accuracy >= 0.90 and m.heldout_log_loss <= 1.05 * m.base_log_loss and m.steps == 300
    accept(7, "protocol 2 training", ok,
           f"accuracy {m.noise_accuracy:.4f}, log-loss {m.heldout_log_loss:.4f} vs base {m.base_log_loss:.4f} "
           f"(ratio {m.heldout_log_loss / m.base_log_loss:.3f})")


@pytest.mark.slow
def test_c08_protocol2_soundness(accept, ctx2):
    spec = ExperimentSpec(protocol=2, strategy="random_outputs", N=8, noise_set=16, trials=1250,
                          noise_mode=PER_POSITION, seed=SEED_P2)
    r = run_attack_experiment(spec, ctx2)
    x = r.extra
    ok = (x["noise_positions"] == 10**4 and x["position_within_3_sigma"]
          and x["noise_sequence_rate"] <= x["noise_sequence_upper"])
    accept(8, "protocol 2 soundness", ok,
           f"per-position {x['position_rate']:.4f} vs 0.0625 (se {x['position_se']:.1e}) over "
           f"{x['noise_positions']}; sequence {x['noise_sequence_rate']} <= {x['noise_sequence_upper']:.2e}")


@pytest.mark.slow
def test_c09_completeness(accept, ctx2):
    spec = ExperimentSpec(protocol=2, strategy="honest", N=8, noise_set=16, trials=10**4, noise_mode=SHARED,
                          seed=SEED_P2)
    r = run_attack_experiment(spec, ctx2)
    x = r.extra
    rejection = x["noise_sequence_rejection_rate"]
    accept(9, "completeness formula", x["completeness_within_3_sigma"],
           f"accuracy {x['position_rate']:.5f}, rejection {rejection:.4f} vs 1-acc^8={x['completeness_prediction']:.4f}")


def test_c10_gradient_check(accept):
    errs = [objective_check(seed) for seed in (0, 1, 2)]
    accept(10, "objective gradient check", max(errs) <= 1e-6,
           "max rel. error " + ", ".join(f"{e:.1e}" for e in errs) + " over 100 coords each")


def test_c11_pretrain_sanity(accept, base_model, heldout):
    loss = log_loss(base_model, heldout)
    accept(11, "base pretrain sanity", loss < 0.9 * math.log(64),
           f"held-out log-loss {loss:.4f} vs 0.9 ln 64 = {0.9 * math.log(64):.4f}")


def test_c12_comm_formula(accept):
    value = comm_overhead_bytes(131, 4)
    ok = value == 72896
    for b in (1, 4, 8):
        f = [comm_overhead_bytes(L, b) for L in range(1, 300)]
        ok &= all(x < y for x, y in zip(f, f[1:]))
        ok &= {f[i + 2] - 2 * f[i + 1] + f[i] for i in range(len(f) - 2)} == {2 * b}
    accept(12, "communication formula", ok, f"comm_overhead_bytes(131, 4) = {value}")


@pytest.mark.slow
def test_c13_greedy_sampling(accept, base_model, cache, ctx):
    r = run_attack_experiment(ExperimentSpec(strategy="sampling_tamper", mode="opaque", N=14, trials=1000, steps=4,
                                             seed=SEED_GEN), ctx)
    rng = Prng(SEED_GEN)
    honest_ok = 0
    seqs = cache.sequences()
    for _ in range(1000):
        prompt = [rng.below(64) for _ in range(1 + rng.below(16))]
        seq = seqs[rng.below(len(seqs))]
        sched = pregenerate_schedule(len(prompt), 3, 4, rng)
        gen = generate_augmented(base_model, prompt, seq, sched, 4)
        honest_ok += (verify_transcript(gen.transcript, sched, cache, seq).verified
                      and verify_greedy_sampling(gen.transcript, gen.tokens, sched).verified)
    accept(13, "greedy-sampling verification", r.rate == 1.0 and r.verified_rate == 0.0 and honest_ok == 1000,
           f"tamper caught at its step {r.rate:.3f} over {r.trials}; honest passed {honest_ok}/1000")


def _flip_each(path, read, n, rng):
    """Flip ``n`` sampled bytes of the blob one at a time; count IntegrityErrors."""
    original = path.read_bytes()
    caught = 0
    for _ in range(n):
        data = bytearray(original)
        data[rng.below(len(data))] ^= 1 + rng.below(255)
        path.write_bytes(bytes(data))
        try:
            read()
        except IntegrityError:
            caught += 1
    path.write_bytes(original)
    return caught


def test_c14_file_round_trips(accept, tmp_path, base_model, cache, trained_modules):
    mods = trained_modules[0]
    rng = Prng(14)
    p1 = build_request([1, 2, 3, 4], cache.sequences()[0], rng)
    p2 = build_noisy_request([5, 6, 7], cache.sequences()[1], mods, base_model, rng, SHARED)
    resp = run_provider(Honest(), p1, make_view(p1, "opaque"), base_model, rng)
    kinds = {
        "model": (save_model, load_model, base_model),
        "noise-params": (save_modules, load_modules, mods),
        "request-p1": (lambda o, p: save_request(o, p, base_model.hash), lambda p: load_request(p)[0], p1),
        "request-p2": (lambda o, p: save_request(o, p, base_model.hash), lambda p: load_request(p)[0], p2),
        "response": (save_response, load_response, resp),
    }
    first, second = tmp_path / "first", tmp_path / "second"
    first.mkdir()
    second.mkdir()
    failures = []
    for name, (save, load, obj) in kinds.items():
        a, b = first / f"{name}.json", second / f"{name}.json"
        save(obj, a)
        save(load(a), b)
        if a.read_bytes() != b.read_bytes() or blob_path(a).read_bytes() != blob_path(b).read_bytes():
            failures.append(f"{name} not byte-identical")
        caught = _flip_each(blob_path(a), lambda: load(a), 25, rng)
        if caught != 25:
            failures.append(f"{name}: {caught}/25 corruptions caught")
    c1, c2 = first / "cache.bin", second / "cache.bin"
    save_cache(load_cache(save_cache(cache, c1)), c2)
    if c1.read_bytes() != c2.read_bytes() or encode_cache(decode_cache(c1.read_bytes())) != c1.read_bytes():
        failures.append("cache not byte-identical")
    caught = _flip_each(c1, lambda: load_cache(c1), 25, rng)
    if caught != 25:
        failures.append(f"cache: {caught}/25 corruptions caught")
    accept(14, "file round-trips", not failures,
           "; ".join(failures) or "6 artifact kinds byte-identical, 150/150 single-byte corruptions caught")


@pytest.mark.slow
def test_c15_worker_invariance(accept, ctx, ctx2):
    specs = [
        (ExperimentSpec(strategy="subset_drop", N=14, trials=400, seed=3), ctx),
        (ExperimentSpec(strategy="position_guess", N=2, trials=400, seed=4), ctx),
        (ExperimentSpec(strategy="cache_guess", mode="opaque", trials=400, seed=5), ctx),
        (ExperimentSpec(strategy="sampling_tamper", mode="opaque", trials=80, seed=6), ctx),
        (ExperimentSpec(protocol=2, strategy="random_outputs", N=8, trials=200, noise_mode=PER_POSITION, seed=7), ctx2),
        (ExperimentSpec(protocol=2, strategy="honest", N=8, trials=200, seed=8), ctx2),
    ]
    same = 0
    for spec, c in specs:
        one = run_attack_experiment(spec, c, workers=1).to_json(wall_clock=False)
        eight = run_attack_experiment(spec, c, workers=8).to_json(wall_clock=False)
        same += one == eight
    accept(15, "determinism under parallelism", same == len(specs),
           f"{same}/{len(specs)} reports identical for 1 vs 8 workers")
