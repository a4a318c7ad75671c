import pytest

_criteria: dict[str, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or rep.when == "teardown":
        return
    if rep.when == "setup" and rep.passed:
        return
    label = marker.args[0]
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    soft = marker.kwargs.get("report_only", False)
    status = "INFO" if soft and rep.passed else ("PASS" if rep.passed else "FAIL")
    if not rep.passed and not detail:
        detail = str(rep.longrepr).strip().splitlines()[-1][:200]
    _criteria[label] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_criteria, key=lambda s: int(s.split()[0])):
        status, detail = _criteria[label]
        terminalreporter.write_line(f"{status}  criterion {label}: {detail}")
