import numpy as np
import pytest

CRITERIA_LINES = []


def report_criterion(number, title, passed, detail=""):
    """Record (and print) the one-line verdict for an acceptance criterion."""
    status = "PASS" if passed else "FAIL"
    line = f"criterion {number} [{status}] {title}: {detail}"
    CRITERIA_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(CRITERIA_LINES, key=lambda s: int(s.split()[1])):
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
