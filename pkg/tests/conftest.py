import pytest

_LINES = []


@pytest.fixture
def report():
    """Print and record one pass/fail line per acceptance criterion, then assert."""
    def emit(n, title, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {title}" + (f" ({detail})" if detail else "")
        print(line)
        _LINES.append(line)
        assert ok, line
    return emit


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
