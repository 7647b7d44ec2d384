import os

import numpy as np
import pytest
from hypothesis import settings

from movelight.experiment import read_scenario

settings.register_profile("ci", max_examples=50, deadline=None)
settings.register_profile("dev", max_examples=10, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))


@pytest.fixture(scope="session")
def single():
    return read_scenario("single.json")


@pytest.fixture(scope="session")
def grid():
    return read_scenario("grid4x4.json")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record a one-line pass/fail verdict for an acceptance criterion."""

    def record(name: str, ok: bool, detail: str) -> bool:
        _VERDICTS.append(f"{name} {'PASS' if ok else 'FAIL'}: {detail}")
        print(_VERDICTS[-1])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[0].split("-")[1])):
            terminalreporter.write_line(line)
