import numpy as np
import pytest

from argf.data import ModalityBatch, SyntheticSpec, generate_synthetic, one_hot
from argf.model import EmbeddingStage


def random_batch(rng, batch=4, dim=6, num_classes=3):
    labels = rng.integers(0, num_classes, size=batch)
    x = {m: rng.normal(size=(batch, dim)) for m in "avl"}
    return ModalityBatch(x, one_hot(labels, num_classes), labels, np.arange(batch))


def zero_params(module):
    for p in module.parameters():
        p.values = np.zeros_like(p.values)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def stage(rng):
    return EmbeddingStage(dim=6, k=4, num_classes=3, rng=rng)


@pytest.fixture
def batch(rng):
    return random_batch(rng)


@pytest.fixture(scope="session")
def small_bundle():
    spec = SyntheticSpec(num_classes=2, dim=6, separation=1.5, count=120, seed=3)
    return generate_synthetic(spec)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
