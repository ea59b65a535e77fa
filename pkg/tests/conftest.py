import numpy as np
import pytest

from rlt import rltoken, vlastub


@pytest.fixture(scope="session")
def backbone():
    return vlastub.FrozenBackbone()


@pytest.fixture(scope="session")
def demos50():
    return vlastub.generate_demos(50, seed=11)


@pytest.fixture(scope="session")
def readout_trained(backbone, demos50):
    """Short Stage-1 run shared by non-acceptance tests (the acceptance
    suite trains its own at the full budget)."""
    ro = rltoken.ReadoutModule.create(seed=0)
    ro, _ = rltoken.train_readout(ro, demos50, steps=600, batch=64, seed=0, backbone=backbone)
    return ro


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
