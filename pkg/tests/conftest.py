"""Shared pytest hooks: a per-criterion pass/fail report for the acceptance suite."""

import pytest

_CRITERIA: dict = {}


def record(criterion, check, passed, detail=""):
    """Log one check of an acceptance criterion; ``passed=None`` marks an informational line."""
    _CRITERIA.setdefault(int(criterion), []).append((check, passed, detail))
    return passed


@pytest.fixture(scope="session")
def criteria():
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for c in sorted(_CRITERIA):
        checks = _CRITERIA[c]
        graded = [p for _, p, _ in checks if p is not None]
        status = "PASS" if graded and all(graded) else "FAIL"
        tr.write_line(f"CRITERION {c}: {status} ({sum(graded)}/{len(graded)} checks)")
        for check, p, detail in checks:
            tag = "info" if p is None else ("pass" if p else "FAIL")
            tr.write_line(f"    {tag:4s}  {check}: {detail}")
