import warnings

import numpy as np
import pytest

from deepmpc.plant import wing_rock_system


@pytest.fixture(autouse=True)
def _quiet_theta_warning():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="theta\\*sigma\\^2")
        yield


@pytest.fixture
def wing_rock():
    return wing_rock_system()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
