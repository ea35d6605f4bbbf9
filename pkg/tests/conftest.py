import json
from pathlib import Path

import numpy as np
import pytest

from peregrinn.nn import load_network_file

FIXTURES = Path(__file__).resolve().parent / "fixtures"

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    failed = report.failed or (report.when == "call" and report.skipped)
    if report.when == "call" or failed:
        prev = _criteria.get(name, True)
        _criteria[name] = prev and not failed


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok in _criteria.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def classifier():
    return load_network_file(FIXTURES / "classifier.json")


@pytest.fixture(scope="session")
def controller():
    return load_network_file(FIXTURES / "controller.json")


def read_fixture(name):
    return json.loads((FIXTURES / name).read_text())
