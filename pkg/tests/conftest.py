import logging
import os
import sys

from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large]
)
settings.load_profile("default")

logging.getLogger("couplet").setLevel(logging.CRITICAL)

_criteria: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    num, title = props["criterion"]
    if report.when == "call" or report.outcome != "passed":
        if report.when == "call" or num not in _criteria:
            _criteria[num] = (title, "PASS" if report.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criteria):
        title, verdict = _criteria[num]
        terminalreporter.write_line(f"{verdict}  {num:>2}. {title}")
