import pytest

_VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")
    config.stash[_VERDICTS] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    verdicts = item.config.stash[_VERDICTS]
    ok, _, detail = verdicts.get(number, (True, title, ""))
    ok = ok and not report.failed
    for key, value in report.user_properties:
        if key == "detail":
            detail = value
    verdicts[number] = (ok, title, detail)


def pytest_terminal_summary(terminalreporter, config):
    verdicts = config.stash.get(_VERDICTS, {})
    if not verdicts:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(verdicts):
        ok, title, detail = verdicts[number]
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
