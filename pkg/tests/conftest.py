import pytest
from hypothesis import HealthCheck, settings

from lrsflow.flow import make_rng

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return make_rng(1234)


_ACCEPTANCE = []


@pytest.fixture
def criterion(request):
    """Record the outcome of one acceptance criterion for the summary table.

    Call ``criterion(number, title)`` once; the pass/fail status is taken
    from the test outcome, and ``detail`` may be updated with measured
    values.
    """
    entry = {}

    def start(number, title):
        entry.update(number=number, title=title, detail="")
        return entry

    yield start
    if entry:
        rep = getattr(request.node, "rep_call", None)
        entry["ok"] = rep is not None and rep.passed
        _ACCEPTANCE.append(entry)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for e in sorted(_ACCEPTANCE, key=lambda e: e["number"]):
        status = "PASS" if e["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {e['number']}: {status}  {e['title']}  {e['detail']}")
