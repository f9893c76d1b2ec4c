import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from embmf.data import SparseRatings  # noqa: E402
from embmf.ppmi import PpmiMatrix  # noqa: E402


@pytest.fixture
def toy():
    """3 users, 4 items, 6 ratings, 4 stored PPMI entries."""
    R = SparseRatings(3, 4, [0, 0, 1, 1, 2, 2], [0, 1, 1, 2, 0, 3], [4.0, 2.0, 5.0, 3.0, 1.0, 4.0])
    S = PpmiMatrix.from_triples(4, [0, 1, 2, 3], [1, 0, 3, 2], [0.7, 0.7, 0.3, 0.3])
    return R, S


# one PASS/FAIL line per acceptance criterion, printed after the run

_criteria: dict[int, tuple[str, bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker
    # skips and setup/teardown errors count as failures
    ok = report.when == "call" and report.passed
    _criteria[number] = (title, _criteria.get(number, (title, True))[1] and ok)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    m = item.get_closest_marker("criterion")
    if m is not None:
        outcome.get_result().criterion = tuple(m.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, ok = _criteria[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}")
