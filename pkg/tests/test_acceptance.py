"""Acceptance battery at desk scale (N=50, M=10^4, seed 11).

The battery runs once per session; every criterion then gets its own test
that prints one PASS/FAIL line.  Deselect with ``-m "not slow"``.
"""
import pytest

from mfsvie.acceptance import CRITERIA, AcceptanceConfig, criterion_10, run_criteria

pytestmark = pytest.mark.slow

CONFIG = AcceptanceConfig()


@pytest.fixture(scope="module")
def battery():
    results = {r.number: r for r in run_criteria(CONFIG)}
    results[10] = criterion_10(CONFIG, [results[k] for k in sorted(CRITERIA)])
    return results


@pytest.mark.parametrize("number", list(range(1, 11)))
def test_criterion(battery, number, capsys):
    res = battery[number]
    with capsys.disabled():
        print(f"\n{res.line()}")
    assert res.checks, "criterion produced no checks"
    assert res.passed, res.text()
