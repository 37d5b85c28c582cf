import sys

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("gradflow", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("gradflow")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
