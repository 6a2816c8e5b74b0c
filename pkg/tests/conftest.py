import pytest

_ACCEPTANCE = []


@pytest.fixture
def report():
    """Record a one-line acceptance verdict that is echoed in the terminal summary."""

    def add(number, passed, detail):
        _ACCEPTANCE.append((number, "PASS" if passed else "FAIL", detail))
        return passed

    return add


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, verdict, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number}: {verdict}  {detail}")
