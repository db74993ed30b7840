import numpy as np
import pytest
import torch

from cosmos.phantom import PhantomConfig, generate_dataset


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture(scope="session")
def small_phantom_cfg():
    return PhantomConfig(n_source=3, n_target=3, n_validation=2, seed=11)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory, small_phantom_cfg):
    out = tmp_path_factory.mktemp("phantoms")
    manifest = generate_dataset(small_phantom_cfg, out)
    return out, manifest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
