from __future__ import annotations

from contextlib import contextmanager

import pytest

_RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_RESULTS] = []


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion.

    Usage: ``with criterion("3 formulas") as notes: ...; notes.append("x=1")``.
    """
    results = request.config.stash[_RESULTS]

    @contextmanager
    def check(label: str):
        notes: list[str] = []
        try:
            yield notes
        except BaseException as exc:
            reason = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
            results.append(f"FAIL criterion {label} [{'; '.join(notes)}] :: {reason}")
            raise
        results.append(f"PASS criterion {label} [{'; '.join(notes)}]")

    return check


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_RESULTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
