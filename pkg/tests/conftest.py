import numpy as np
import pytest

from impactmpc.dynamics import MechConstants, ThetaParams


@pytest.fixture
def mech():
    return MechConstants()


@pytest.fixture
def theta_true():
    # reference plant parameters used across the suite
    return ThetaParams(lambda_gain=0.95, spring_preload=120.0, spring_stiffness=4.0e4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_states(rng, n, speed=250.0, phi_box=2.5):
    """States in the operating box: angles within a few rad, speeds +-speed."""
    x = np.empty((n, 4))
    x[:, 0] = rng.uniform(-10.0, 10.0, n)
    x[:, 1] = x[:, 0] - rng.uniform(-phi_box, phi_box, n)
    x[:, 2] = rng.uniform(-speed, speed, n)
    x[:, 3] = rng.uniform(-speed, speed, n)
    return x
