"""Prints one PASS/FAIL line per shipping criterion after the run."""

_RESULTS: dict[str, str] = {}


def _criterion(nodeid: str):
    test = nodeid.split("::")[-1].split("[")[0]
    if test.startswith("test_criterion_"):
        return test[len("test_") :]
    return None


def pytest_runtest_logreport(report):
    name = _criterion(report.nodeid)
    if name is None:
        return
    if report.when == "call":
        if report.skipped:
            _RESULTS[name] = "SKIP"
        else:
            _RESULTS[name] = "PASS" if report.passed else "FAIL"
    elif report.failed:  # setup or teardown blew up
        _RESULTS[name] = "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.write_sep("=", "shipping criteria")
    for name in sorted(_RESULTS):
        label = name.replace("criterion_", "criterion ").replace("_", " ")
        terminalreporter.write_line(f"{label}: {_RESULTS[name]}")
