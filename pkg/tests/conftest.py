import pytest

_LINES: dict = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one acceptance line and fails the test if not ok."""

    def report(n, ok, detail):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _LINES[n] = line
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(_LINES):
            terminalreporter.write_line(_LINES[n])
