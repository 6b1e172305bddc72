import pytest

_RESULTS = {}


@pytest.fixture
def criterion():
    """``criterion(n, passed, detail)`` records one acceptance line for the run summary."""

    def record(n: int, passed: bool, detail: str) -> bool:
        _RESULTS[n] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        passed, detail = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
