import json
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"

_acceptance: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion check")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    entry = _acceptance.setdefault(number, {"title": title, "ok": True, "seconds": 0.0, "ran": False})
    if call.when == "call":
        entry["ran"] = True
        entry["seconds"] += call.duration
    if call.excinfo is not None:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        e = _acceptance[number]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        terminalreporter.write_line(f"AC{number:<2} {status}  {e['title']}  ({e['seconds']:.2f}s)")


@pytest.fixture
def fixtures() -> Path:
    return FIXTURES


@pytest.fixture
def reciprocal_system():
    statement = (FIXTURES / "reciprocal_system_problem.txt").read_text(encoding="utf-8").rstrip("\n")
    subproblems = json.loads((FIXTURES / "reciprocal_system_subproblems.json").read_text(encoding="utf-8"))
    return statement, subproblems
