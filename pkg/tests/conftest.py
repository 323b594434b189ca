"""Collects one verdict line per acceptance criterion for the terminal summary."""
from __future__ import annotations

_VERDICTS: list[tuple[str, str, str]] = []


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
        status = "PASS" if report.outcome == "passed" else "FAIL"
        _VERDICTS.append((report.nodeid.split("::")[-1], status, detail))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in _VERDICTS:
        terminalreporter.write_line(f"{status}  {name}  {detail}".rstrip())
