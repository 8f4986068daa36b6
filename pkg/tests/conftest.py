import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dentatlas import phantom

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def small_template():
    """64^3 phantom at 0.6 mm, shared across modules."""
    return phantom.generate_template(0, 64, 0.6)


@pytest.fixture(scope="session")
def small_subject(small_template):
    return phantom.synthesize_subject(small_template, 7, 2.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance summary lines, filled by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
