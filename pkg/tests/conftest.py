import os

import pytest
import torch

torch.set_num_threads(int(os.environ.get("LGV_NUM_THREADS", "1")))


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


# acceptance criteria: one summary line per criterion, aggregated over its tests
_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion a test belongs to")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when != "call" and not (call.when == "setup" and call.excinfo):
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "notes": []})
    entry["ok"] &= call.excinfo is None
    entry["notes"] += [f"{k}={v}" for k, v in item.user_properties]
    if call.excinfo is not None:
        entry["notes"].append(f"{item.name} failed")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        notes = "; ".join(e["notes"])
        terminalreporter.write_line(f"criterion {n} [{'PASS' if e['ok'] else 'FAIL'}] {e['title']}" + (f" ({notes})" if notes else ""))
