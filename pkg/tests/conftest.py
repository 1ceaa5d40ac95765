import numpy as np
import pytest
import torch

CRITERIA = {
    1: "kernel suite",
    2: "encoding suite",
    3: "attention suite",
    4: "gradient checks",
    5: "weight inflation",
    6: "clustering oracle",
    7: "metric identities",
    8: "overfit check",
    9: "directional ablation",
    10: "loss comparison harness",
}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")
    config._criteria = {}
    config._criteria_notes = {}


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    results = item.config._criteria.setdefault(n, [])
    if call.when == "call" or (call.when == "setup" and call.excinfo is not None):
        results.append(call.excinfo is None)


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    for name, value in report.user_properties:
        if name.startswith("criterion_note"):
            pytest_runtest_logreport.notes.append(value)


pytest_runtest_logreport.notes = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config._criteria
    if not results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(CRITERIA):
        if n not in results:
            continue
        ok = all(results[n]) and results[n]
        tr.write_line(f"criterion {n:>2} {CRITERIA[n]:<26} {'PASS' if ok else 'FAIL'}")
    for note in pytest_runtest_logreport.notes:
        tr.write_line(note)
