import pytest

_REPORT: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def acceptance_report():
    """Criterion number -> (passed, detail); printed in the terminal summary."""
    return _REPORT


def pytest_terminal_summary(terminalreporter):
    if not _REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_REPORT):
        passed, detail = _REPORT[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
