import pytest

_CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    """Records one PASS/FAIL line per acceptance criterion and fails the test on FAIL."""

    def report(label: str, ok: bool, detail: str) -> None:
        line = f"{label}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
