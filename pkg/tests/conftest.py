import sys

import numpy as np
import pytest

from mgtedit.codec import InstructionTokens, TokenGrid, make_codebook
from mgtedit.transformer import ModelConfig, init_weights


def tiny_config(**kw):
    base = dict(d=16, heads=2, mm_blocks=1, sm_blocks=2, codebook_size=8, vocab_size=12, patch=2, max_text=8)
    base.update(kw)
    return ModelConfig(**base)


def random_grid(rng, h, w, k):
    return TokenGrid(h, w, rng.integers(0, k, h * w), k)


def instruction(ids, keywords=None):
    ids = np.asarray(ids)
    return InstructionTokens(ids, [f"w{i}" for i in ids], keywords)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_weights():
    w = init_weights(tiny_config(), np.random.default_rng(7))
    # zero-initialized biases would hide bugs in their gradients
    r = np.random.default_rng(8)
    for t in w.tensors.values():
        t.data += 0.05 * r.standard_normal(t.data.shape)
    return w


@pytest.fixture(scope="session")
def codebook8():
    return make_codebook(8, 2, np.random.default_rng(3))


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(acceptance.RESULTS):
            terminalreporter.write_line(acceptance.RESULTS[n])
