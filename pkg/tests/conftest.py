import hashlib
from pathlib import Path

import pytest

from dmaudit.mockserver import MockServer, study_scenario
from dmaudit.transport import HttpClient, Limits

FIXTURES = Path(__file__).parent / "fixtures"

_acceptance_results: dict = {}


@pytest.fixture(scope="session")
def study_mock():
    """Shared read-only mock. Tests that mutate state use ``mock`` instead."""
    with MockServer(study_scenario()) as srv:
        yield srv


@pytest.fixture
def mock():
    with MockServer(study_scenario()) as srv:
        yield srv


@pytest.fixture
def client_for():
    def make(srv, timeout=5.0):
        return HttpClient(srv.endpoint_map(), Limits(timeout=timeout))

    return make


@pytest.fixture
def client(study_mock, client_for):
    return client_for(study_mock)


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    key = (number, title)
    failed = call.excinfo is not None and not call.excinfo.errisinstance(pytest.skip.Exception)
    prev = _acceptance_results.get(key, True)
    if call.when in ("setup", "call", "teardown"):
        _acceptance_results[key] = prev and not failed


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), ok in sorted(_acceptance_results.items()):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {number}: {title}")
