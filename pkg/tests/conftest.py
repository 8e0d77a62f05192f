import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mote import moe  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_layer():
    return moe.random_layer(4, 2, 16, 8, seed=7)


@pytest.fixture
def small_batch(small_layer):
    return moe.synthesize_batch(small_layer, 5, seed=11, lam=0.5)
