import pytest

_criteria: dict = {}


@pytest.fixture(scope="session")
def criterion():
    """``criterion(n, ok, detail)`` records a verdict line and returns ``ok``."""
    def record(n: int, ok: bool, detail: str) -> bool:
        _criteria[n] = (bool(ok), detail)
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        ok, detail = _criteria[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
