from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_ACCEPTANCE: list = []


@pytest.fixture
def acceptance():
    """Record one line per acceptance criterion for the terminal summary."""

    def record(number: int, name: str, passed: bool, detail: str = "") -> None:
        _ACCEPTANCE.append((number, name, passed, detail))

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(_ACCEPTANCE):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {number}: {name} -- {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
