import pytest
from hypothesis import HealthCheck, settings

from mfsvie.core import build_grid, sample_ensemble

settings.register_profile("mfsvie", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("mfsvie")


@pytest.fixture(scope="session")
def grid20():
    return build_grid(1.0, 20)


@pytest.fixture(scope="session")
def ens20(grid20):
    return sample_ensemble(grid20, 4000, 7)
