from pathlib import Path

import pytest

from lungnet.synthetic import write_table1_fixture

BUNDLED = Path(__file__).resolve().parents[1] / "fixtures" / "table1"


@pytest.fixture(scope="session")
def table1(tmp_path_factory):
    """The bundled fixture if present, otherwise a freshly generated copy."""
    if (BUNDLED / "database.tsv").exists():
        return BUNDLED
    return write_table1_fixture(tmp_path_factory.mktemp("table1"))


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
