import pytest

from priveri.corpus import make_corpus
from priveri.model import ModelConfig, heldout_windows, init_params, pretrain
from priveri.numerics import Prng
from priveri.protocol1 import generate_cache

# (number, title, passed, detail) rows filled in by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}: {detail}")


@pytest.fixture(scope="session")
def corpus():
    return make_corpus(64, 0)


@pytest.fixture(scope="session")
def base_model(corpus):
    """The desk model after 200 pretraining steps."""
    _, train, _ = corpus
    return pretrain(init_params(ModelConfig(), 0), train, 200, seed=0)


@pytest.fixture(scope="session")
def heldout(corpus):
    return heldout_windows(corpus[2])


@pytest.fixture(scope="session")
def cache(base_model):
    return generate_cache(base_model, 100, 3, Prng(1))


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(vocab_size=32, embed_dim=32, n_layers=2, n_heads=4, max_positions=64)


@pytest.fixture(scope="session")
def small_model(small_config):
    return init_params(small_config, 3)


@pytest.fixture(scope="session")
def trained_modules(base_model, corpus, heldout):
    from priveri.protocol2 import init_modules, train_modules

    _, train, _ = corpus
    return train_modules(base_model, init_modules(base_model, 16, seed=0), train, rng=Prng(0), heldout=heldout)


@pytest.fixture
def accept():
    """Record one acceptance line for the terminal summary, then assert it."""

    def record(number, title, passed, detail):
        ACCEPTANCE.append((number, title, bool(passed), detail))
        assert passed, f"criterion {number} ({title}) failed: {detail}"

    return record
