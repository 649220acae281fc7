"""Shared fixtures and the acceptance summary printed at the end of a run."""

import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _RESULTS.setdefault(number, {"title": title, "ok": True, "ran": False, "detail": []})
    if report.when == "call":
        entry["ran"] = True
        entry["detail"] += [text for name, text in item.user_properties if name == "measured"]
    if report.failed:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        entry = _RESULTS[number]
        status = "PASS" if entry["ok"] and entry["ran"] else ("SKIP" if entry["ok"] else "FAIL")
        line = f"criterion {number:>2}: {status}  {entry['title']}"
        if entry["detail"]:
            line += "  [" + "; ".join(entry["detail"]) + "]"
        terminalreporter.write_line(line)


@pytest.fixture
def measured(record_property):
    """Attach a measured value to the acceptance summary line."""
    def note(text):
        record_property("measured", text)
    return note
