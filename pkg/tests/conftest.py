import numpy as np
import pytest

from vexlm.corpus import GeneratorParams, generate_synthetic_corpus
from vexlm.model import ModelConfig, init_params
from vexlm.tokenizer import expand, train_base


@pytest.fixture(scope="session")
def synth_corpus():
    return generate_synthetic_corpus(0, GeneratorParams())


@pytest.fixture(scope="session")
def base_docs(synth_corpus):
    return [d for d in synth_corpus if d.lang == "base"]


@pytest.fixture(scope="session")
def target_docs(synth_corpus):
    return [d for d in synth_corpus if d.lang == "target"]


@pytest.fixture(scope="session")
def base_tok(base_docs):
    return train_base(base_docs, 512)


@pytest.fixture(scope="session")
def expanded_tok(base_tok, target_docs):
    return expand(base_tok, target_docs, min_freq=5, max_new=128)


@pytest.fixture
def tiny_config():
    return ModelConfig(n_layers=2, n_heads=2, d_model=8, d_ff=16, max_seq_len=16, vocab_size=300)


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, np.random.default_rng(0))
