import pytest

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion, then assert."""
    def record(number: int, title: str, passed: bool, detail: str = "") -> None:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title}"
        if detail:
            line += f" ({detail})"
        _ACCEPTANCE[number] = line
        print(line)
        assert passed, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
