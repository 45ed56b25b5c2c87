import numpy as np
import pytest

from stereopose.geometry import CameraRig
from stereopose.instruments import make_instrument_set


@pytest.fixture(scope="session")
def models():
    return make_instrument_set(7, 13)


@pytest.fixture(scope="session")
def rig():
    return CameraRig()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_acceptance_lines = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(number, name, ok, detail):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {name} ({detail})"
        _acceptance_lines.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance")
        for line in sorted(_acceptance_lines):
            terminalreporter.write_line(line)
