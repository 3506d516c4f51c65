import re

import numpy as np
import pytest

from udet.tensor import precision

_verdicts: dict = {}
_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


@pytest.fixture
def f64():
    with precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def detail(request):
    """Attach a one-line measurement to an acceptance criterion's verdict."""
    def note(text: str) -> None:
        request.node.user_properties.append(("detail", text))
    return note


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if m is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        notes = "; ".join(v for k, v in report.user_properties if k == "detail")
        _verdicts[(int(m.group(1)), m.group(2))] = ("PASS" if report.passed else "FAIL", notes)


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number, title in sorted(_verdicts):
        status, notes = _verdicts[number, title]
        line = f"[{status}] {number}. {title.replace('_', ' ')}"
        terminalreporter.write_line(line + (f"  ({notes})" if notes else ""))
