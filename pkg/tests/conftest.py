import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tdmr.channel import ChannelConfig, generate_dataset

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_channel():
    return ChannelConfig()


@pytest.fixture(scope="session")
def small_dataset(small_channel):
    """Four sectors of 3000 bits on the default channel."""
    return generate_dataset(small_channel, 4, 3000, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
