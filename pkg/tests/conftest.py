import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=200, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_simplex(rng, n, concentration=1.0):
    return rng.dirichlet(np.full(n, concentration))
