import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from sunny_port.synth import rcpsp_like_kb, worked_example_kb  # noqa: E402

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DEMO = os.path.join(ROOT, "demo")


@pytest.fixture
def worked_kb():
    return worked_example_kb()


@pytest.fixture
def cascade_kb():
    return rcpsp_like_kb()
