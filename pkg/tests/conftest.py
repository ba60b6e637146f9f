import numpy as np
import pytest

from smf.data import generate_toy_data
from smf.model import ModelConfig, Transformer, copy_model
from smf.trainer import TrainConfig, collect_background_stats, pretrain, stage1_retrofit

_ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_LINES] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """Record and print one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(criterion: str, ok: bool, detail: str = "") -> None:
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}" + (f"  ({detail})" if detail else "")
        request.config.stash[_ACCEPTANCE_LINES].append(line)
        print(line)
        assert ok, line

    return record


@pytest.fixture(scope="session")
def small_data():
    return generate_toy_data(seed=0, n_world=8, n_task=8, pretrain_chars=6000, retrofit_chars=3000,
                             eval_chars=800, mc_train_per_fact=4, mc_eval_per_fact=2)


@pytest.fixture(scope="session")
def small_base(small_data):
    """Toy-preset model pretrained on the small corpus until it fits it reasonably (about 25 s)."""
    m = Transformer(ModelConfig.toy(), seed=0)
    pretrain(m, small_data.pretrain_examples(64, fact_repeats=2),
             TrainConfig(lr=3e-3, epochs=30, warmup_steps=10, batch_size=16, max_seq_len=256))
    return m


@pytest.fixture(scope="session")
def _retrofitted(small_data, small_base):
    m = copy_model(small_base)
    m.insert_memory("additive", seed=0)
    rec = stage1_retrofit(m, small_data.retrofit_examples(64),
                          TrainConfig(lr=1e-2, epochs=8, warmup_steps=5, batch_size=16, max_seq_len=256))
    batches = [[e] for e in small_data.retrofit_examples(64)[:32]]
    return m, collect_background_stats(m, batches), rec


@pytest.fixture
def retrofitted(_retrofitted):
    """Fresh copy of (additive-memory model after retrofit, background stats)."""
    m, stats, _ = _retrofitted
    return copy_model(m), stats


@pytest.fixture
def rng():
    return np.random.default_rng(0)
