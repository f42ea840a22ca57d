import pytest

_acceptance_lines: dict[str, str] = {}


@pytest.fixture(scope="session")
def acceptance():
    """``record(criterion, ok, detail)`` stores one PASS/FAIL line per acceptance criterion."""

    def record(criterion, ok, detail=""):
        line = f"ACCEPTANCE {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _acceptance_lines[str(criterion)] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_lines:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_acceptance_lines, key=lambda k: (len(k), k)):
        terminalreporter.write_line(_acceptance_lines[key])
