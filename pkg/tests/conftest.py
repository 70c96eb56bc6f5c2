import pytest

_VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_VERDICTS] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when == "teardown":
        return
    number, title = mark.args
    verdicts = item.config.stash[_VERDICTS]
    if report.when == "setup" and report.passed:
        return
    detail = dict(item.user_properties).get("metrics", "")
    verdicts[number] = (title, report.passed, detail)


def pytest_terminal_summary(terminalreporter, config):
    verdicts = config.stash[_VERDICTS]
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(verdicts):
        title, passed, detail = verdicts[number]
        line = f"{'PASS' if passed else 'FAIL'} criterion {number:2d}: {title}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
