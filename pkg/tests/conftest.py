"""Shared, expensive fixtures: one default calibration and cached flight episodes."""

from functools import lru_cache

import pytest

from avdm.calibration import calibrate
from avdm.flight import ControlParams, FlightConfig, run_episode, terrain_library


@lru_cache(maxsize=1)
def _calibration():
    return calibrate()


@pytest.fixture(scope="session")
def calibration():
    """``(fitted params, CalibrationResult, samples)`` on the default grid."""
    return _calibration()


@pytest.fixture(scope="session")
def calibrated(calibration):
    return calibration[0]


@lru_cache(maxsize=None)
def _episode(name, seed, duration):
    params = _calibration()[0]
    return run_episode(FlightConfig(duration=duration), terrain_library(name, seed), params, ControlParams())


@pytest.fixture(scope="session")
def episode():
    """``episode(name, seed=0, duration=20.0)`` -> cached TrajectoryLog."""

    def get(name, seed=0, duration=20.0):
        return _episode(name, seed, float(duration))

    return get


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
