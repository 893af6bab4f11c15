import pytest

_outcomes = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    rep = outcome.get_result()
    n, title = mark.args
    key = (n, item.nodeid)
    # a failure in any phase sticks; setup errors count as failures
    if rep.failed or (rep.when == "call" and key not in _outcomes):
        _outcomes[key] = (title, "PASS" if rep.passed else "FAIL",
                          dict(item.user_properties))
    elif rep.when == "setup" and rep.skipped:
        _outcomes[key] = (title, "SKIP", {})


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for (n, _), (title, status, measured) in sorted(_outcomes.items(), key=lambda kv: kv[0][0]):
        detail = " ".join(f"{k}={v}" for k, v in measured.items())
        terminalreporter.write_line(f"criterion {n:>2} {status}  {title}  {detail}".rstrip())
