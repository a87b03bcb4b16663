import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240518)


# --------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL/SKIP line per criterion in the summary

ACCEPTANCE_NOTES: dict[int, str] = {}
_ACCEPTANCE_OUTCOMES: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not (rep.when == "setup" and rep.outcome != "passed")):
        return
    number, title = mark.args
    status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
    _ACCEPTANCE_OUTCOMES[number] = (status, title)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE_OUTCOMES):
        status, title = _ACCEPTANCE_OUTCOMES[number]
        note = ACCEPTANCE_NOTES.get(number, "")
        terminalreporter.write_line(f"criterion {number:2d} {status}: {title}" + (f" | {note}" if note else ""))
