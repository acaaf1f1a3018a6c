import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def low_rank(rng, m, d, r):
    return rng.standard_normal((m, r)) @ rng.standard_normal((r, d))
