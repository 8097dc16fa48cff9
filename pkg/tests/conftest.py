"""Shared fixtures.

``smoke`` trains the default configuration once per session (several
minutes) and runs every acceptance check on it; the per-criterion lines are
echoed in the terminal summary.
"""
import pytest

from streamdiff.config import RunConfig
from streamdiff.pipeline import run_pipeline

_LINES: list[str] = []


@pytest.fixture(scope="session")
def smoke(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    result = run_pipeline(RunConfig(), out, acceptance=True)
    _LINES[:] = [r.line() for r in result.acceptance]
    return result


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
