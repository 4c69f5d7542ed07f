import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mmrobust.backdoor import PoisonSpec, TriggerSpec, poison_dataset  # noqa: E402
from mmrobust.corpus import GenConfig, generate_synthetic, split_event_disjoint  # noqa: E402
from mmrobust.detectors import DetectorConfig, train  # noqa: E402


@pytest.fixture(scope="session")
def corpus():
    return generate_synthetic(GenConfig())


@pytest.fixture(scope="session")
def splits(corpus):
    return split_event_disjoint(corpus)


@pytest.fixture(scope="session")
def train_set(splits):
    return splits[0]


@pytest.fixture(scope="session")
def test_set(splits):
    return splits[1]


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_synthetic(GenConfig(n_samples=120, seed=5))


@pytest.fixture(scope="session")
def tiny_model(tiny_corpus):
    params, _ = train(DetectorConfig(epochs=3, batch=32), tiny_corpus)
    return params


class ModelZoo:
    """Trains each detector at most once per session."""

    def __init__(self, train_set):
        self.train_set = train_set
        self._cache = {}

    def trained(self, cfg: DetectorConfig = DetectorConfig()):
        """(params, TrainReport) for ``cfg`` on the default training split."""
        if cfg not in self._cache:
            self._cache[cfg] = train(cfg, self.train_set)
        return self._cache[cfg]

    def clean(self):
        return self.trained()[0]

    def poisoned(self, trigger: TriggerSpec, fraction: float, seed: int = 0, selection="uniform", event_id=None):
        key = ("poisoned", trigger, fraction, seed, selection, event_id)
        if key not in self._cache:
            pd = poison_dataset(self.train_set, PoisonSpec(trigger, fraction, seed, selection, event_id))
            self._cache[key] = (train(DetectorConfig(), pd.dataset)[0], pd)
        return self._cache[key]


@pytest.fixture(scope="session")
def zoo(train_set):
    return ModelZoo(train_set)


@pytest.fixture(scope="session")
def clean_model(zoo):
    return zoo.clean()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
