import numpy as np
import pytest

from idiomadv import data as D
from idiomadv.model import ModelConfig, init_model

_ACCEPTANCE = []


@pytest.fixture
def acceptance():
    def record(criterion, ok, detail=""):
        _ACCEPTANCE.append((criterion, bool(ok), detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {criterion}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def zero_shot_splits():
    return D.generate_synthetic_dataset(seed=7, setting="zero_shot")


@pytest.fixture(scope="session")
def one_shot_splits():
    return D.generate_synthetic_dataset(seed=7, setting="one_shot")


@pytest.fixture
def tiny_cfg():
    return ModelConfig(vocab_size=10, d_model=4, n_layers=1, n_heads=1, d_ff=8, max_len=8,
                       dropout_rate=0.0, seed=11)


@pytest.fixture
def small_model(zero_shot_splits):
    vocab = D.build_vocab(D.training_pool(zero_shot_splits, "zero_shot"), 2048)
    cfg = ModelConfig(vocab_size=len(vocab), d_model=16, n_layers=2, n_heads=2, d_ff=32,
                      max_len=64, dropout_rate=0.0, seed=5)
    return init_model(cfg, vocab), vocab
