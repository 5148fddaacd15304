import numpy as np
import pytest

from modules.mtl import build_model
from modules.textdata import random_embeddings, synth_generate, synthetic_vocabulary

TASK_CLASSES = {"overlap0": 2, "marker1": 2}


@pytest.fixture
def vocab():
    return synthetic_vocabulary()


@pytest.fixture
def table(vocab):
    return random_embeddings(vocab, 6, seed=3)


@pytest.fixture
def two_tasks(vocab):
    return {"overlap0": synth_generate("SHARED-OVERLAP", 16, 11, vocab, "overlap0"),
            "marker1": synth_generate("PRIVATE-MARKER(1)", 16, 12, vocab, "marker1")}


@pytest.fixture
def make_model(table, vocab):
    def factory(framework="FS", hidden_dim=4, mlp_dim=8, seed=5, **kwargs):
        return build_model(framework, dict(TASK_CLASSES), table, hidden_dim, mlp_dim, seed, vocab=vocab, **kwargs)
    return factory


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
