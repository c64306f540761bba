"""Per-criterion PASS/FAIL summary for the acceptance suite."""

from collections import defaultdict

_outcomes: dict = defaultdict(list)
_details: dict = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion the test belongs to")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            item.user_properties.append(("criterion", mark.args[0]))


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    n = props.get("criterion")
    if n is None:
        return
    if report.when == "call" or report.outcome != "passed":
        _outcomes[n].append(report.outcome)
    if report.when == "call":
        _details[n].extend(f"{k}={v}" for k, v in report.user_properties if k != "criterion")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        ok = all(o == "passed" for o in _outcomes[n])
        extra = f"  ({', '.join(_details[n])})" if _details[n] else ""
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}{extra}")
