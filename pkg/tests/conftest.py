"""Collects acceptance outcomes and prints one verdict line per criterion."""

import pytest

_ACCEPTANCE = "test_acceptance.py::"
_results: dict[str, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    if _ACCEPTANCE not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::", 1)[1]
        detail = "; ".join(f"{k}={v}" for k, v in report.user_properties)
        _results[name] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for name, (verdict, detail) in sorted(_results.items()):
        line = f"{verdict}  {name}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)


@pytest.fixture
def measured(record_property):
    """Attach measured values to an acceptance verdict line."""
    return record_property
