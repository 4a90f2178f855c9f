import pytest

_CRITERIA: dict[int, str] = {}


@pytest.fixture(scope="session")
def criterion():
    """``criterion(n, passed, detail)`` records one acceptance verdict line."""

    def record(n: int, passed: bool, detail: str) -> bool:
        _CRITERIA[n] = f"CRITERION {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(_CRITERIA[n])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[n])
