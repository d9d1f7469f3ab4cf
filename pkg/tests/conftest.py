import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cvgeo.synthetic import make_toy_dataset  # noqa: E402

_CRITERIA: dict[int, dict] = {}


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    """The synthetic 32-location tree (train + test splits + google pool)."""
    root = tmp_path_factory.mktemp("toy")
    make_toy_dataset(root)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "seconds": 0.0, "ran": False})
    if report.when == "call" or (report.when == "setup" and report.failed):
        entry["ran"] = True
        entry["seconds"] += report.duration
        entry["ok"] = entry["ok"] and report.passed


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["ok"] and e["ran"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}  {status}  {e['title']}  ({e['seconds']:.1f} s)")
