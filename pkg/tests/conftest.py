import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fcald.grid import build_grid

settings.register_profile("fcald", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("fcald")


@pytest.fixture(scope="session")
def grid17():
    return build_grid((0.0, 0.0, 1.0, 1.0), 17)


@pytest.fixture(scope="session")
def grid33():
    return build_grid((0.0, 0.0, 1.0, 1.0), 33)


def gaussian_field(grid, center=(0.5, 0.5), sigma=0.15, amp=1.0):
    X, Y = grid.mesh()
    return amp * np.exp(-((X - center[0]) ** 2 + (Y - center[1]) ** 2) / (2 * sigma**2))


# acceptance bookkeeping: one summary line per criterion

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    num, title = mark.args
    entry = _CRITERIA.setdefault(num, {"title": title, "ok": True, "details": []})
    entry["ok"] &= rep.passed
    if rep.when == "call":
        entry["details"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        e = _CRITERIA[num]
        status = "PASS" if e["ok"] else "FAIL"
        detail = "; ".join(e["details"])
        terminalreporter.write_line(f"criterion {num:2d} {status}  {e['title']}" + (f"  [{detail}]" if detail else ""))
