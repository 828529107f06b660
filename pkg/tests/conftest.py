"""Per-criterion PASS/FAIL summary for tests marked ``criterion``."""

import pytest

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "details": []})
    entry["ok"] &= rep.passed
    entry["details"] += [str(v) for k, v in item.user_properties if k == "detail"]
    if rep.failed:
        entry["details"].append(f"{item.name} failed")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.write_sep("=", "acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        detail = "; ".join(dict.fromkeys(e["details"]))
        tr.write_line(f"criterion {number:2d} {'PASS' if e['ok'] else 'FAIL'}  {e['title']}"
                      + (f"  [{detail}]" if detail else ""))
