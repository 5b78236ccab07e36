import numpy as np
import pytest

SEED = 20261014


@pytest.fixture
def rng():
    return np.random.default_rng(SEED)


def random_kernels(rng, count, m):
    return rng.dirichlet(np.ones(m), size=(count, m))
