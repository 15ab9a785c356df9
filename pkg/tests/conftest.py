import os

import numpy as np
import pytest

from ctgan_sim.phantom import random_phantom

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


@pytest.fixture(scope="session")
def healthy_phantom():
    vol, _ = random_phantom(11)
    return vol


@pytest.fixture(scope="session")
def two_nodule_phantom():
    vol, nodules = random_phantom(5, 2, (12.0, 12.0))
    return vol, nodules


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
