import re

import numpy as np
import pytest

_ACCEPTANCE: dict[int, tuple[str, float]] = {}
_NAME = re.compile(r"test_criterion_(\d+)")


def pytest_runtest_logreport(report):
    m = _NAME.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = "PASS" if report.outcome == "passed" else "FAIL"
        _ACCEPTANCE[n] = (status, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        status, dur = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  ({dur:.1f} s)")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
