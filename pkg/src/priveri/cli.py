"""Command-line entry point: ``priveri <subcommand> [flags]``.

Exit codes: 0 success, 1 verification failure, 2 usage or file-format error.
Settings come from built-in defaults, then ``--config`` JSON, then flags.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import harness, privacy, protocol1, protocol2
from .corpus import make_corpus
from .errors import PriveriError
from .exchange import load_request, load_response, save_request, save_response
from .model import ModelConfig, heldout_windows, init_params, load_model, log_loss, pretrain, save_model
from .numerics import Prng

log = logging.getLogger("priveri")

EXIT_OK, EXIT_REJECTED, EXIT_USAGE = 0, 1, 2

DEFAULTS = {
    "model": None,
    "cache": None,
    "noise_params": None,
    "request": None,
    "response": None,
    "substitute_model": None,
    "protocol": 1,
    "mode": "structural",
    "strategy": "honest",
    "n": 14,
    "k": 3,
    "cache_size": 100,
    "noise_set": 16,
    "noise_mode": protocol2.SHARED,
    "tol": protocol1.DEFAULT_TOL,
    "lambda": 3.5,
    "lr": None,  # per subcommand: 3e-3 pretrain, 5e-4 train-noise
    "steps": None,  # per subcommand: 200 pretrain, 300 train-noise, 4 generate
    "batch": 8,
    "trials": 1000,
    "seed": None,
    "corpus_seed": 0,
    "drop": 1,
    "workers": 1,
    "prompt": None,
    "out": None,
    "kind": None,
    "length": None,
    "bytes": 4,
    "accuracies": None,
    "model_config": {},
}

STEP_DEFAULTS = {"pretrain": 200, "train-noise": 300, "generate": 4, "attack": 4, "fingerprint-study": 200}
LR_DEFAULTS = {"pretrain": 3e-3, "train-noise": 5e-4, "fingerprint-study": 1e-3}


class UsageError(Exception):
    pass


def load_config(path) -> dict:
    """Read a JSON config; unknown keys are reported and ignored."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    cfg = {}
    for key, value in raw.items():
        norm = key.replace("-", "_")
        if norm not in DEFAULTS:
            print(f"warning: unknown config key {key!r} ignored", file=sys.stderr)
            continue
        cfg[norm] = value
    return cfg


def resolve(args: argparse.Namespace) -> dict:
    """Defaults < config file < flags; seed falls back to PRIVERI_SEED, then 0."""
    settings = dict(DEFAULTS)
    if getattr(args, "config", None):
        settings.update(load_config(args.config))
    for key, value in vars(args).items():
        if key in DEFAULTS:
            settings[key] = value
    if settings["seed"] is None:
        env = os.environ.get("PRIVERI_SEED")
        try:
            settings["seed"] = int(env) if env not in (None, "") else 0
        except ValueError as exc:
            raise UsageError(f"PRIVERI_SEED must be an integer, got {env!r}") from exc
    cmd = args.command
    if settings["steps"] is None:
        settings["steps"] = STEP_DEFAULTS.get(cmd, 1)
    if settings["lr"] is None:
        settings["lr"] = LR_DEFAULTS.get(cmd, 1e-3)
    _validate(settings)
    return settings


def _validate(s):
    for key in ("n", "k", "cache_size", "noise_set", "trials", "workers", "batch", "drop", "bytes"):
        if int(s[key]) < 1:
            raise UsageError(f"--{key.replace('_', '-')} must be >= 1")
    if int(s["noise_set"]) < 2:
        raise UsageError("--noise-set must be >= 2")
    if int(s["steps"]) < 0:
        raise UsageError("--steps must be >= 0")
    if float(s["tol"]) < 0 or float(s["lambda"]) < 0 or float(s["lr"]) < 0:
        raise UsageError("--tol, --lambda and --lr must be non-negative")
    if int(s["protocol"]) not in (1, 2):
        raise UsageError("--protocol must be 1 or 2")
    if s["mode"] not in ("structural", "opaque"):
        raise UsageError("--mode must be structural or opaque")


def _need(s, key):
    if not s.get(key):
        raise UsageError(f"--{key.replace('_', '-')} is required")
    path = Path(s[key])
    if not path.exists():
        raise UsageError(f"{path} does not exist")
    return path


def _emit(report: dict, s) -> None:
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if s.get("out"):
        Path(s["out"]).write_text(text + "\n", encoding="utf-8")


def _require_out(s) -> Path:
    if not s.get("out"):
        raise UsageError("--out is required")
    return Path(s["out"])


def _corpus(s, vocab_size):
    return make_corpus(vocab_size, int(s["corpus_seed"]))


# subcommands ----------------------------------------------------------------

def cmd_gen_model(s):
    cfg = ModelConfig(**s["model_config"]) if s["model_config"] else ModelConfig()
    out = _require_out(s)
    params = init_params(cfg, int(s["seed"]))
    save_model(params, out)
    print(json.dumps({"model": str(out), "sha256": params.hash_hex}, indent=2))
    return EXIT_OK


def cmd_pretrain(s):
    params = load_model(_need(s, "model"))
    out = _require_out(s)
    _, train, held = _corpus(s, params.config.vocab_size)
    trained = pretrain(params, train, int(s["steps"]), batch=int(s["batch"]), lr=float(s["lr"]), seed=int(s["seed"]),
                       log=lambda step, loss: log.info("step %d loss %.4f", step, loss))
    save_model(trained, out)
    hw = heldout_windows(held)
    print(json.dumps({"model": str(out), "sha256": trained.hash_hex, "heldout_log_loss": log_loss(trained, hw),
                      "uniform_log_loss": float(np.log(params.config.vocab_size))}, indent=2))
    return EXIT_OK


def cmd_gen_cache(s):
    params = load_model(_need(s, "model"))
    out = _require_out(s)
    cache = protocol1.generate_cache(params, int(s["cache_size"]), int(s["k"]), Prng(int(s["seed"])))
    protocol1.save_cache(cache, out)
    print(json.dumps({"cache": str(out), "entries": len(cache), "K": cache.K}, indent=2))
    return EXIT_OK


def _prompt(s, V, rng):
    if s.get("prompt"):
        toks = [int(t) for t in str(s["prompt"]).replace(",", " ").split()]
        if any(not 0 <= t < V for t in toks):
            raise UsageError(f"prompt tokens must lie in [0, {V})")
        return toks
    return [rng.below(V) for _ in range(int(s["n"]))]


def cmd_request(s):
    params = load_model(_need(s, "model"))
    cache = protocol1.load_cache(_need(s, "cache"))
    out = _require_out(s)
    rng = Prng(int(s["seed"]))
    prompt = _prompt(s, params.config.vocab_size, rng)
    seqs = cache.sequences()
    sentinel = seqs[rng.below(len(seqs))]
    if int(s["protocol"]) == 2:
        modules = protocol2.load_modules(_need(s, "noise_params"))
        req = protocol2.build_noisy_request(prompt, sentinel, modules, params, rng, s["noise_mode"])
    else:
        req = protocol1.build_request(prompt, sentinel, rng)
    save_request(req, out, params.hash)
    print(json.dumps({"request": str(out), "length": req.length, "protocol": int(s["protocol"])}, indent=2))
    return EXIT_OK


def _substitutes(s):
    if s.get("substitute_model"):
        return {"substitute": load_model(_need(s, "substitute_model"))}
    return {}


def cmd_respond(s):
    params = load_model(_need(s, "model"))
    cache = protocol1.load_cache(_need(s, "cache"))
    req, _ = load_request(_need(s, "request"))
    out = _require_out(s)
    subs = _substitutes(s)
    strategy = privacy.strategy_from_name(s["strategy"], k=int(s["drop"]), substitute=subs.get("substitute"))
    view = privacy.make_view(req, s["mode"], cache, params.hash)
    resp = privacy.run_provider(strategy, req, view, params, Prng(int(s["seed"])))
    save_response(resp, out)
    print(json.dumps({"response": str(out), "label": resp.label, "kind": resp.kind}, indent=2))
    return EXIT_OK


def cmd_verify(s):
    params = load_model(_need(s, "model"))
    cache = protocol1.load_cache(_need(s, "cache"))
    req, _ = load_request(_need(s, "request"))
    resp = load_response(_need(s, "response"))
    tol = float(s["tol"])
    if isinstance(req, protocol2.NoisyRequest):
        modules = protocol2.load_modules(_need(s, "noise_params"))
        res = protocol2.verify_noisy(resp.outputs, req, cache, modules, params, tol)
        report = {"verified": res.verified, "sentinel_verified": res.sentinel_check.verified,
                  "per_sentinel_l1": list(res.sentinel_check.per_sentinel_l1), "noise_matches": list(res.noise_matches),
                  "tol": tol}
        ok = res.verified
    else:
        res = protocol1.verify(resp.outputs, req, cache, tol)
        report = {"verified": res.verified, "per_sentinel_l1": list(res.per_sentinel_l1), "tol": tol}
        ok = res.verified
    _emit(report, s)
    return EXIT_OK if ok else EXIT_REJECTED


def cmd_generate(s):
    params = load_model(_need(s, "model"))
    cache = protocol1.load_cache(_need(s, "cache"))
    rng = Prng(int(s["seed"]))
    prompt = _prompt(s, params.config.vocab_size, rng)
    seqs = cache.sequences()
    sentinel = seqs[rng.below(len(seqs))]
    steps = int(s["steps"])
    if steps < 1:
        raise UsageError("--steps must be >= 1 for generate")
    schedule = protocol1.pregenerate_schedule(len(prompt), cache.K, steps, rng)
    strategy = privacy.strategy_from_name(s["strategy"], k=int(s["drop"]),
                                          substitute=_substitutes(s).get("substitute"))
    resp = privacy.run_generation(strategy, params, prompt, sentinel, schedule, steps, s["mode"],
                                  Prng(int(s["seed"]) + 1), cache)
    gen = resp.generation
    transcript = protocol1.verify_transcript(gen.transcript, schedule, cache, sentinel, float(s["tol"]))
    sampling = protocol1.verify_greedy_sampling(gen.transcript, gen.tokens, schedule)
    report = {"tokens": gen.tokens, "verify_transcript": {"verified": transcript.verified,
                                                          "first_failure": transcript.first_failure},
              "verify_sampling": {"verified": sampling.verified, "first_failure": sampling.first_failure},
              "verified": transcript.verified and sampling.verified}
    _emit(report, s)
    return EXIT_OK if report["verified"] else EXIT_REJECTED


def cmd_train_noise(s):
    params = load_model(_need(s, "model"))
    out = _require_out(s)
    _, train, held = _corpus(s, params.config.vocab_size)
    seed = int(s["seed"])
    modules = protocol2.init_modules(params, int(s["noise_set"]), seed=seed)
    trained, metrics = protocol2.train_modules(params, modules, train, lam=float(s["lambda"]), lr=float(s["lr"]),
                                               steps=int(s["steps"]), batch=int(s["batch"]), rng=Prng(seed),
                                               heldout=heldout_windows(held), mode=s["noise_mode"])
    protocol2.save_modules(trained, out)
    print(json.dumps({"noise_params": str(out), "heldout_log_loss": metrics.heldout_log_loss,
                      "base_log_loss": metrics.base_log_loss, "noise_accuracy": metrics.noise_accuracy}, indent=2))
    return EXIT_OK


def cmd_attack(s):
    params = load_model(_need(s, "model"))
    cache = protocol1.load_cache(_need(s, "cache"))
    modules = protocol2.load_modules(_need(s, "noise_params")) if int(s["protocol"]) == 2 else None
    spec = harness.ExperimentSpec(protocol=int(s["protocol"]), strategy=s["strategy"], mode=s["mode"], N=int(s["n"]),
                                  K=cache.K, cache_size=len(cache), noise_set=int(s["noise_set"]),
                                  trials=int(s["trials"]), seed=int(s["seed"]), tol=float(s["tol"]),
                                  drop=int(s["drop"]), noise_mode=s["noise_mode"], steps=int(s["steps"]),
                                  substitute="substitute" if s["strategy"] == "substitute" else "")
    ctx = harness.ExperimentContext(params, cache, modules, _substitutes(s))
    report = harness.run_attack_experiment(spec, ctx, workers=int(s["workers"]))
    _emit(report.to_dict(), s)
    return EXIT_OK


BOUND_NAMES = {
    "cache-guess": "cache_guess", "position-guess": "position_guess", "subset-leave-one-out": "subset_leave_one_out",
    "subset-drop": "subset_drop", "noise-per-position": "noise_per_position", "noise-sequence": "noise_sequence",
    "completeness": "completeness", "comm-overhead": "comm_overhead",
}


def cmd_bounds(s):
    kind = s.get("kind")
    if kind not in BOUND_NAMES:
        raise UsageError(f"--kind must be one of {', '.join(BOUND_NAMES)}")
    name = BOUND_NAMES[kind]
    n, k = int(s["n"]), int(s["k"])
    if name == "comm_overhead":
        L = int(s["length"]) if s.get("length") is not None else n + k
        _emit({"kind": kind, "length": L, "bytes_per_element": int(s["bytes"]),
               "value": harness.comm_overhead_bytes(L, int(s["bytes"]))}, s)
        return EXIT_OK
    params = {"cache_guess": {"cache_size": int(s["cache_size"])},
              "position_guess": {"N": n, "K": k}, "subset_leave_one_out": {"N": n, "K": k},
              "subset_drop": {"N": n, "K": k, "k": int(s["drop"])},
              "noise_per_position": {"noise_set": int(s["noise_set"])},
              "noise_sequence": {"noise_set": int(s["noise_set"]), "N": n}}.get(name)
    if name == "completeness":
        if not s.get("accuracies"):
            raise UsageError("--accuracies is required for completeness")
        accs = s["accuracies"]
        accs = [float(a) for a in (accs.split(",") if isinstance(accs, str) else accs)]
        params = {"accuracies": accs}
    frac = harness.analytic_fraction(name, **params)
    _emit({"kind": kind, "params": params, "value": float(frac), "exact": f"{frac.numerator}/{frac.denominator}"}, s)
    return EXIT_OK


def cmd_fingerprint_study(s):
    params = load_model(_need(s, "model"))
    _, train, _ = _corpus(s, params.config.vocab_size)
    seed = int(s["seed"])
    perturbations = harness.default_perturbations(params, train, seed=seed, pretrain_steps=int(s["steps"]),
                                                  finetune_lr=float(s["lr"]))
    table = harness.fingerprint_study(params, perturbations, int(s["trials"]), int(s["k"]), Prng(seed))
    _emit(table.to_dict(), s)
    return EXIT_OK


COMMANDS = {
    "gen-model": (cmd_gen_model, "initialise and save a model"),
    "pretrain": (cmd_pretrain, "next-token pretraining on the synthetic corpus"),
    "gen-cache": (cmd_gen_cache, "build a sentinel cache"),
    "request": (cmd_request, "write a sentinel-augmented request record"),
    "respond": (cmd_respond, "answer a request record as a (possibly dishonest) provider"),
    "verify": (cmd_verify, "check a response record against the cache"),
    "generate": (cmd_generate, "non-interactive generation with transcript and sampling checks"),
    "train-noise": (cmd_train_noise, "train the noise embedder and predictor"),
    "attack": (cmd_attack, "Monte Carlo attack experiment"),
    "bounds": (cmd_bounds, "analytic probability and communication calculators"),
    "fingerprint-study": (cmd_fingerprint_study, "separation of the base model from perturbed models"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    S = argparse.SUPPRESS
    common.add_argument("--config", default=S, help="JSON settings file; flags override it")
    common.add_argument("--model", default=S)
    common.add_argument("--cache", default=S)
    common.add_argument("--noise-params", dest="noise_params", default=S)
    common.add_argument("--request", default=S)
    common.add_argument("--response", default=S)
    common.add_argument("--substitute-model", dest="substitute_model", default=S)
    common.add_argument("--protocol", type=int, choices=(1, 2), default=S)
    common.add_argument("--mode", choices=("structural", "opaque"), default=S)
    common.add_argument("--strategy", choices=privacy.ALL_STRATEGIES, default=S)
    common.add_argument("--n", type=int, default=S, help="prompt length N")
    common.add_argument("--k", type=int, default=S, help="sentinel count K")
    common.add_argument("--cache-size", dest="cache_size", type=int, default=S)
    common.add_argument("--noise-set", dest="noise_set", type=int, default=S)
    common.add_argument("--noise-mode", dest="noise_mode", choices=(protocol2.SHARED, protocol2.PER_POSITION),
                        default=S)
    common.add_argument("--tol", type=float, default=S)
    common.add_argument("--lambda", dest="lambda", type=float, default=S)
    common.add_argument("--lr", type=float, default=S)
    common.add_argument("--steps", type=int, default=S)
    common.add_argument("--batch", type=int, default=S)
    common.add_argument("--trials", type=int, default=S)
    common.add_argument("--seed", type=int, default=S)
    common.add_argument("--corpus-seed", dest="corpus_seed", type=int, default=S)
    common.add_argument("--drop", type=int, default=S, help="slots skipped by subset_drop")
    common.add_argument("--workers", type=int, default=S)
    common.add_argument("--prompt", default=S, help="comma separated token ids")
    common.add_argument("--kind", default=S, help="bounds: " + ", ".join(BOUND_NAMES))
    common.add_argument("--length", type=int, default=S)
    common.add_argument("--bytes", type=int, default=S)
    common.add_argument("--accuracies", default=S)
    common.add_argument("--out", default=S)
    common.add_argument("-v", "--verbose", action="store_true", default=S)

    parser = argparse.ArgumentParser(prog="priveri", description="Verified inference over a private channel.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        settings = resolve(args)
        return COMMANDS[args.command][0](settings)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PriveriError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
