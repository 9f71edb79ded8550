import os

import pytest
from hypothesis import HealthCheck, settings

import nsc  # noqa: F401  (enables float64)

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("thorough", max_examples=400, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def tmp_out(tmp_path):
    return tmp_path / "out"
