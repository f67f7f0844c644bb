"""Per-criterion pass/fail summary for tests marked ``acceptance(k, title)``."""

import pytest

_RESULTS: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    entry = _RESULTS.setdefault(number, {"title": title, "passed": True, "ran": False, "details": []})
    if report.when == "call" or report.failed:
        entry["ran"] = True
        entry["passed"] &= report.passed
    if report.when == "call":
        entry["details"] += [str(v) for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_RESULTS):
        e = _RESULTS[number]
        status = "PASS" if e["passed"] and e["ran"] else ("FAIL" if e["ran"] else "NOT RUN")
        tr.write_line(f"criterion {number}: {status}  {e['title']}")
        for d in e["details"]:
            tr.write_line(f"    {d}")
