"""Shared fixtures: the default synthetic dataset and the models fitted on it.

Trained latent operators are expensive (tens of seconds each), so they are
built lazily, once per session, and shared by every test that needs them.
"""

import numpy as np
import pytest

from silo_lab import codec as codec_mod
from silo_lab import data, degradations, diffusion, operator


@pytest.fixture(scope="session")
def dataset():
    return data.generate(data.DatasetSpec(train_count=2000, test_count=100))


@pytest.fixture(scope="session")
def heldout():
    """500 images from seeds far outside the train/test range."""
    return data.generate(data.DatasetSpec(train_count=1, test_count=500, master_seed=100_000)).test


@pytest.fixture(scope="session")
def codec(dataset):
    return codec_mod.fit(dataset.train, 32)


@pytest.fixture(scope="session")
def schedule():
    return diffusion.make_schedule(200)


@pytest.fixture(scope="session")
def gmm(dataset, codec):
    return diffusion.fit_gmm(codec.encode(dataset.train), 8, 1e-4, seed=0)


class OperatorCache:
    def __init__(self, dataset, codec, gmm, schedule):
        self.args = (codec, gmm)
        self.schedule = schedule
        self.images = dataset.train
        self._models = {}
        self.histories = {}

    def get(self, kind: str, **overrides) -> operator.LatentOperatorModel:
        key = (kind, tuple(sorted(overrides.items())))
        if key not in self._models:
            cfg = operator.OperatorTrainConfig(**overrides)
            codec, gmm = self.args
            op = degradations.make_op(kind)
            hist = self.histories[key] = []
            self._models[key] = operator.train_operator(codec, gmm, op, self.schedule, self.images, cfg, history=hist)
        return self._models[key]


@pytest.fixture(scope="session")
def operators(dataset, codec, gmm, schedule):
    return OperatorCache(dataset, codec, gmm, schedule)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
