import pytest

from sysanchor import corpus, model, training
from sysanchor.tokenizer import ToyTokenizer

DESK_CONFIG = dict(n_layers=8, d=64, n_heads=4, vocab_size=128, max_t=64)


@pytest.fixture(scope="session")
def tokenizer():
    return ToyTokenizer()


@pytest.fixture(scope="session")
def desk_backbone(tokenizer):
    """Backbone pretrained on the rule-free echo task; shared by the
    training smoke test and the behavioral acceptance run."""
    echo = corpus.generate_echo_corpus(tokenizer, 2048, seed=10)
    cfg = training.TrainConfig(lr=1e-3, warmup_ratio=0.05, batch_size=16, epochs=1, seed=10)
    return training.pretrain_backbone(
        model.ModelConfig(**DESK_CONFIG), echo, cfg, total_steps=600, seed=10
    )


def tiny_config(**overrides):
    base = dict(n_layers=4, d=16, n_heads=2, vocab_size=32, max_t=48)
    base.update(overrides)
    return model.ModelConfig(**base)


@pytest.fixture
def tiny_cal_model():
    return model.build_model(tiny_config(adapter="cal", placement="EVERY2"), seed=7)


@pytest.fixture
def tiny_base_model():
    return model.build_model(tiny_config(), seed=7)


def random_tokens(rng, b, t, vocab=32):
    return rng.integers(0, vocab, size=(b, t))
