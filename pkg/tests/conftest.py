import pytest

_RESULTS = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    if rep.when == "call" or (rep.when == "setup" and (rep.skipped or rep.failed)):
        verdict = "SKIP" if rep.skipped else ("PASS" if rep.passed else "FAIL")
        prev = _RESULTS.get(name)
        # a criterion spread over several tests fails if any part fails
        order = {"FAIL": 2, "SKIP": 1, "PASS": 0}
        if prev is None or order[verdict] > order[prev[0]]:
            detail = ""
            if rep.skipped and isinstance(rep.longrepr, tuple):
                detail = rep.longrepr[2]
            _RESULTS[name] = (verdict, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_RESULTS):
        verdict, detail = _RESULTS[name]
        line = f"{verdict}  {name}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)
