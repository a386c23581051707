import numpy as np
import pytest

from dformer.tensor import current_tape


@pytest.fixture(autouse=True)
def _clean_tape():
    current_tape().reset()
    yield
    current_tape().reset()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
