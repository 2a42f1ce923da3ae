import functools

import numpy as np
import pytest

from potkit import TorusGrid, assemble_generator, builtin_field, dual_generator, invariant_density

CENTER = (0.5, 0.5, 0.5)


@functools.lru_cache(maxsize=None)
def setup(family: str, n: int, d: int = 3, scheme: str = "upwind", **params):
    """Cached (grid, field, generator, invariant density, dual) for a builtin family."""
    grid = TorusGrid(d, n)
    field = builtin_field(family, d, **params)
    M = assemble_generator(field, grid, scheme)
    pi = invariant_density(M if scheme == "upwind" else assemble_generator(field, grid))
    return grid, field, M, pi, dual_generator(M, pi)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance bookkeeping: one pass/fail line per criterion

_criteria: dict[str, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(id, title): acceptance criterion this test belongs to")


def pytest_collection_finish(session):
    # after deselection, so -k / -m runs count only the selected checks
    for item in session.items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            cid, title = mark.args
            entry = _criteria.setdefault(cid, {"title": title, "passed": 0, "failed": 0, "failures": []})
            entry.setdefault("expected", 0)
            entry["expected"] += 1


def pytest_runtest_logreport(report):
    # count the call phase, or a setup phase that errored before the call
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    cid = dict(report.user_properties).get("criterion")
    if cid not in _criteria:
        return
    entry = _criteria[cid]
    if report.passed:
        entry["passed"] += 1
    else:
        entry["failed"] += 1
        entry["failures"].append(report.nodeid.split("::")[-1])


@pytest.hookimpl(tryfirst=True)
def pytest_runtest_setup(item):
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        item.user_properties.append(("criterion", mark.args[0]))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for cid in sorted(_criteria, key=lambda c: (len(c), c)):
        e = _criteria[cid]
        ran = e["passed"] + e["failed"]
        if ran == 0:
            status = "NOT RUN"
        elif e["failed"] == 0 and ran == e["expected"]:
            status = "PASS"
        elif e["failed"] == 0:
            status = "PARTIAL"
        else:
            status = "FAIL"
        line = f"criterion {cid}: {status}  ({e['passed']}/{e['expected']} checks)  {e['title']}"
        if e["failures"]:
            line += "  failing: " + ", ".join(e["failures"])
        tr.write_line(line)
