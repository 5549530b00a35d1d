import numpy as np
import pytest

from stgp.data import BoundingBox, SpatioTemporalGrid

SMALL_BOX = BoundingBox(-34.0, 18.4, -33.9, 18.52)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_grid():
    return SpatioTemporalGrid(SMALL_BOX, 0.0, 168.0, 6, 6, 4.0)
