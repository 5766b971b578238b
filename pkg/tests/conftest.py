import pytest

from halign.lexicon import load_lexicon, starter_lexicon_path


@pytest.fixture(scope="session")
def starter():
    return load_lexicon(starter_lexicon_path())


# One pass/fail line per acceptance criterion at the end of the run.
_ACCEPTANCE: dict[int, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    num = int(name.split("_")[2])
    if report.when == "call":
        _ACCEPTANCE[num] = "PASS" if report.passed else "FAIL"
    elif report.when == "setup" and (report.failed or report.skipped):
        _ACCEPTANCE[num] = "FAIL" if report.failed else "SKIP"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n}: {_ACCEPTANCE[n]}")
