import pytest

_LINES: list[str] = []


@pytest.fixture
def report_criterion():
    """Record one acceptance line; printed together at the end of the session."""

    def record(number: int, passed: bool, text: str) -> None:
        _LINES.append(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {text}")

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
