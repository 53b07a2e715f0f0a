from __future__ import annotations

import pytest

from prunekit.data import TaskSpec, gen_corpus, train_test_split
from prunekit.model import ModelConfig, TrainConfig, build, train_full
from prunekit.numerics import Rng


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(vocab_size=16, d_model=16, n_heads=2, d_ff=32,
                       encoder_layers=2, decoder_layers=3, max_positions=16)


@pytest.fixture
def tiny_model(tiny_config):
    return build(tiny_config, Rng(7))


def identity_task(vocab_size: int = 12, max_len: int = 5) -> TaskSpec:
    """Copy task: identity cipher, no reordering."""
    return TaskSpec(
        vocab_size=vocab_size,
        cipher=tuple(range(vocab_size)),
        reorder_window=0,
        min_len=3, max_len=max_len, seed=0,
        content_range=(3, vocab_size),
    )


@pytest.fixture(scope="session")
def copy_task() -> TaskSpec:
    return identity_task()


@pytest.fixture(scope="session")
def copy_corpus(copy_task):
    return train_test_split(gen_corpus(copy_task, 90, seed=3),
                            test_size=10, seed=0, dev_size=8)


@pytest.fixture(scope="session")
def copy_model(copy_corpus):
    """A model trained to convergence (loss < 0.05) on the copy task."""
    config = ModelConfig(vocab_size=12, d_model=16, n_heads=2, d_ff=32,
                         encoder_layers=1, decoder_layers=2, max_positions=16)
    model = build(config, Rng(11))
    _, curve = train_full(
        model, copy_corpus,
        TrainConfig(epochs=30, batch_size=8, learning_rate=3e-3, weight_decay=0.0),
        Rng(5),
    )
    assert curve[-1] < 0.05, f"copy model failed to converge: loss {curve[-1]}"
    return model
