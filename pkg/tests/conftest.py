import os

os.environ.setdefault("HCNN_TEST_MODE", "1")

import numpy as np
import pytest

from hcnn import ckks


@pytest.fixture(scope="session")
def desk_a_params():
    return ckks.desk_a()


@pytest.fixture(scope="session")
def desk_a_keys(desk_a_params):
    rng = np.random.default_rng(0xA11CE)
    steps = [1 << i for i in range(12)]  # covers any step by composition
    return ckks.keygen(desk_a_params, rng, rotations=steps)


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
