import os
import sys

import pytest
from hypothesis import HealthCheck, settings as hyp_settings

sys.path.insert(0, os.path.abspath(os.path.dirname(__file__)))

from core.device_model import SpectralGrid, generate_device  # noqa: E402

hyp_settings.register_profile("fast", max_examples=15, deadline=None,
                              suppress_health_check=[HealthCheck.function_scoped_fixture])
hyp_settings.register_profile("thorough", max_examples=200, deadline=None,
                              suppress_health_check=[HealthCheck.function_scoped_fixture])
hyp_settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "fast"))


@pytest.fixture(scope="session")
def chain_device():
    """Eight-atom biased chain cut into four blocks."""
    return generate_device("chain", Na=8, Nb=2, Norb=2, bnum=4, seed=7, Vds=0.1)


@pytest.fixture(scope="session")
def ribbon_device():
    return generate_device("ribbon", Na=24, Nb=4, Norb=2, bnum=4, seed=3, Vds=0.1)


@pytest.fixture
def small_grid():
    return SpectralGrid(nkz=1, nqz=1, ne=10, nomega=2).validate()
