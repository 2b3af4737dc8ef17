import io

import pytest

from mgvo.cli import dispatch
from mgvo.federation import SimFederation
from mgvo.store import LocalStore


@pytest.fixture
def store(tmp_path):
    s = LocalStore(tmp_path / "node", "n1")
    yield s
    s.close()


@pytest.fixture
def fed(tmp_path):
    f = SimFederation(tmp_path / "fed", seed=7)
    yield f
    f.close()


def cli_invoker(client=None):
    def invoke(argv):
        out, err = io.StringIO(), io.StringIO()
        code = dispatch(argv, client=client, stdout=out, stderr=err)
        return code, out.getvalue(), err.getvalue()
    return invoke


# criterion number -> PASS/FAIL line, filled in by test_acceptance
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
