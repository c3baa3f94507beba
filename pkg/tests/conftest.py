import time
from contextlib import contextmanager

import pytest

_LINES = []


@pytest.fixture
def criterion(capsys):
    """Context manager that reports one PASS/FAIL line for an acceptance criterion."""

    @contextmanager
    def record(number, title, setup_s=0.0):
        t0 = time.perf_counter()
        status = "FAIL"
        try:
            yield
            status = "PASS"
        finally:
            line = f"criterion {number:>2}: {status}  {title}  ({time.perf_counter() - t0 + setup_s:.1f}s)"
            _LINES.append(line)
            with capsys.disabled():
                print(f"\n{line}")

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
