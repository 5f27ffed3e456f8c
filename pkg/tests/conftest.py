import pytest

_criteria_lines = []


@pytest.fixture(scope="session")
def criterion_report():
    """Collects one summary line per acceptance criterion."""

    def record(number, passed, detail):
        _criteria_lines.append((number, f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"))

    return record


def pytest_terminal_summary(terminalreporter):
    if _criteria_lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_criteria_lines):
            terminalreporter.write_line(line)
