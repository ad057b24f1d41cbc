import pytest

from backtrack_audit.scenarios import EXAMPLE1, scenario_model
from backtrack_audit.scm_core import build_model


@pytest.fixture(scope="session")
def example1():
    return build_model(EXAMPLE1)


@pytest.fixture(scope="session")
def balanced():
    return scenario_model("balanced")


@pytest.fixture(scope="session")
def unbalanced():
    return scenario_model("unbalanced")


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
