import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> (test outcome, detail line)
ACCEPTANCE: dict[int, list] = {}
_NODES: dict[str, int] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture
def detail(request):
    """Record a one-line summary for the acceptance criterion under test."""
    n = request.node.get_closest_marker("criterion").args[0]

    def put(text: str) -> None:
        ACCEPTANCE.setdefault(n, [None, ""])[1] = text
        print(f"criterion {n}: {text}")

    return put


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    n = _NODES.get(report.nodeid)
    if n is not None:
        ACCEPTANCE.setdefault(n, [None, ""])[0] = report.outcome


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            _NODES[item.nodeid] = m.args[0]


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        outcome, text = ACCEPTANCE[n]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {verdict}  {text}")
