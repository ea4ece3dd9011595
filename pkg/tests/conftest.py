import pytest

import helpers


def pytest_terminal_summary(terminalreporter):
    if not helpers.ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(helpers.ACCEPTANCE):
        terminalreporter.write_line(helpers.ACCEPTANCE[n])


@pytest.fixture(scope="session")
def acceptance_log():
    return helpers.ACCEPTANCE
