"""Collects acceptance-criterion outcomes and prints one line per criterion."""
import pytest

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): test belongs to an acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "passed": 0, "failed": [], "notes": []})
    if report.when == "call" and report.passed:
        entry["passed"] += 1
        entry["notes"] += getattr(item, "acceptance_notes", [])
    elif report.failed:
        entry["failed"].append(item.name)


@pytest.fixture
def note(request):
    """Attach a one-line measurement to the criterion summary."""
    notes = request.node.acceptance_notes = []
    return notes.append


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    tr.write_line("criterion 1: SUBSTITUTED  full-scale absolute numbers are out of desk scale; criteria 2-9 stand in")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "FAIL" if e["failed"] else "PASS"
        tr.write_line(f"criterion {number}: {status}  {e['title']}")
        for n in e["notes"]:
            tr.write_line(f"    {n}")
        for name in e["failed"]:
            tr.write_line(f"    failed: {name}")
