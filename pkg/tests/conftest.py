from __future__ import annotations

import pytest

_RESULTS: dict[str, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(cid, title): test belongs to an acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        cid, title = marker.args
        entry = _RESULTS.setdefault(cid, {"title": title, "parts": []})
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        entry["parts"].append((item.name, rep.outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_RESULTS, key=lambda c: (len(c), c)):
        entry = _RESULTS[cid]
        ok = all(o == "passed" for _, o, _ in entry["parts"])
        terminalreporter.write_line(f"[PRIMARY] criterion {cid}: {'PASS' if ok else 'FAIL'}  {entry['title']}")
        for name, o, detail in entry["parts"]:
            terminalreporter.write_line(f"    {o.upper():7s} {name}" + (f"  ({detail})" if detail else ""))
