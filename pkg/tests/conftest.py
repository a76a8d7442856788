import numpy as np
import pytest

from blockbits.toymodel import (ModelSpec, build_model, load_checkpoint, make_calibration, make_corpus,
                                pretrain, save_checkpoint)

TINY = ModelSpec(vocab=16, d_model=8, n_layers=2, n_heads=2, d_ff=16, seq_len=8, seed=3)
PRETRAIN_TAG = "pretrained-v1-2000"


@pytest.fixture(scope="session")
def tiny_model():
    return build_model(TINY)


@pytest.fixture(scope="session")
def tiny_batch():
    return np.random.default_rng(0).integers(0, TINY.vocab, size=(3, TINY.seq_len))


@pytest.fixture(scope="session")
def corpus():
    return make_corpus(256, 200_000, 0)


@pytest.fixture(scope="session")
def calib(corpus):
    return make_calibration(corpus, 128, 64, 1).sequences


@pytest.fixture(scope="session")
def pretrained(request, corpus):
    """Default-spec model after the default 2000 SGD steps, cached between sessions."""
    path = request.config.cache.mkdir("blockbits") / f"{PRETRAIN_TAG}.ckpt"
    if path.exists():
        return load_checkpoint(path)
    model = pretrain(build_model(ModelSpec()), corpus)
    save_checkpoint(model, path)
    return model
