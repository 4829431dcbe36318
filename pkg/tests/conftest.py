import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from swarmfp.grid import GridSpec

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def grid41():
    return GridSpec.square(4.0, 0.1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
