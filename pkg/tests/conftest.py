import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("clpd", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("clpd")

CRITERIA = pytest.StashKey[list]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion reported in the terminal summary")
    config.stash[CRITERIA] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def outcome(request):
    """Dict an acceptance test fills with ``detail`` (and, if non-gating, ``status``)."""
    request.node.acceptance = {}
    return request.node.acceptance


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    report = (yield).get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    info = getattr(item, "acceptance", {})
    status = info.get("status") or ("PASS" if report.passed else "FAIL")
    detail = info.get("detail", "")
    if report.failed and call.excinfo is not None:
        detail = f"{detail}  [{call.excinfo.typename}: {str(call.excinfo.value).splitlines()[0][:120]}]".strip()
    line = f"criterion {marker.args[0]:<3} {status:<20} {detail}"
    item.config.stash[CRITERIA].append(line)


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
