import numpy as np
import pytest
import torch

from slint.data import FIXTURE_CONFIG, load_fixture
from slint.kge import TransEConfig, train_transe


@pytest.fixture(scope="session")
def micro_kg():
    return load_fixture()


@pytest.fixture(scope="session")
def micro_table(micro_kg):
    return train_transe(micro_kg, TransEConfig(dim=8, epochs=200, lr=0.02, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture
def fixture_cfg():
    """Tiny TrainConfig sized for the six-entity micro graph."""
    from slint.config import read_config_file
    from slint.trainer import TrainConfig

    base = read_config_file(FIXTURE_CONFIG)

    def make(**overrides):
        return TrainConfig.from_dict({**base, **overrides})

    return make
