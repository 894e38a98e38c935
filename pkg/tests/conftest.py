import pytest

_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance verdict, then fail the test if it did not hold."""

    def record(number: int, name: str, ok: bool, detail: str = "") -> None:
        _LINES.append(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip())
        assert ok, f"criterion {number} ({name}) failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES):
            terminalreporter.write_line(line)
