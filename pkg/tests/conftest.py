import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one PASS/FAIL line per acceptance criterion, printed after the run
_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): test implements acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n, title = mark.args
    entry = _criteria.setdefault(n, {"title": title, "ok": True, "notes": []})
    if rep.failed:
        entry["ok"] = False
    entry["notes"].extend(v for k, v in item.user_properties if k == "measured")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        line = f"criterion {n}: {'PASS' if e['ok'] else 'FAIL'} - {e['title']}"
        if e["notes"]:
            line += " [" + "; ".join(dict.fromkeys(e["notes"])) + "]"
        terminalreporter.write_line(line)
