"""Acceptance criteria 1-15, one test each, at the fixed suite seed.

Each test prints its criterion line; the lines are repeated in the terminal
summary. Criteria that fail on conflicting fixtures are left failing.
"""

import pytest

from bbm4lab import suite

LINES: list[str] = []

pytestmark = pytest.mark.acceptance


@pytest.fixture(scope="module")
def first_runs():
    return {}


def _check(n, first_runs):
    r = suite.CRITERIA[n](suite.SEED, 1)
    if n in suite.MC_CRITERIA:
        first_runs[n] = r
    line = f"{r.line()} [{r.seconds:.0f}s]"
    print(line)
    LINES.append(line)
    assert r.passed, line


@pytest.mark.parametrize("n", sorted(suite.CRITERIA))
def test_criterion(n, first_runs):
    _check(n, first_runs)


def test_criterion_15_determinism(first_runs):
    missing = sorted(set(suite.MC_CRITERIA) - set(first_runs))
    for n in missing:  # running this test alone
        first_runs[n] = suite.CRITERIA[n](suite.SEED, 1)
    r = suite.c15(first_runs, suite.SEED, 1)
    line = f"{r.line()} [{r.seconds:.0f}s]"
    print(line)
    LINES.append(line)
    assert r.passed, line
