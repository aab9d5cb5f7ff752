import random

import numpy as np
import pytest

from splitkv.kv_sync import CloudServer, EdgeClient, WireCapture, kv_sentinels, privacy_audit
from splitkv.model import ModelConfig, init_model


@pytest.fixture
def rng():
    return np.random.default_rng(20241015)


def random_config(r: random.Random, max_layers=4, max_heads=4, max_width=32, max_vocab=64, seed=None) -> ModelConfig:
    H = r.randint(1, max_heads)
    d = r.randint(1, max_width // H)
    return ModelConfig(
        n_layers=r.randint(1, max_layers),
        n_heads=H,
        d_model=H * d,
        vocab_size=r.randint(8, max_vocab),
        max_positions=128,
        init_seed=r.getrandbits(64) if seed is None else seed,
    )


def random_tokens(r: random.Random, n: int, vocab: int) -> list[int]:
    return [r.randrange(vocab) for _ in range(n)]


@pytest.fixture(scope="module")
def small_model():
    return init_model(ModelConfig(n_layers=3, n_heads=2, d_model=16, vocab_size=48, max_positions=128, init_seed=42))


@pytest.fixture
def cloud(small_model):
    prompts = {7: list(range(5, 25)), 8: [3, 1, 4, 1, 5, 9, 2, 6]}
    with CloudServer(small_model, prompts) as server:
        yield server


def audited_session(model, server, edge_tokens, steps, **kwargs):
    """Run one edge session with capture on and assert the capture leaks nothing."""
    capture = WireCapture()
    sess = EdgeClient(model, server.address, capture=capture, **kwargs).run(edge_tokens, steps)
    report = privacy_audit(capture, edge_tokens, kv_sentinels(sess.cache, model.config.n_heads))
    assert report.ok, report.violations[:5]
    assert not report.no_traffic
    return sess, capture


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
