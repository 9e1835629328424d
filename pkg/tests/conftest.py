import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from plmlab.config import get_preset
from plmlab.model import build_model

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=400,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def micro_model():
    return build_model(get_preset("plm-micro"), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary ------------------------------------------------------

_ACCEPTANCE: dict[str, tuple[str, float, str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        if report.skipped:
            reason = report.longrepr[2] if isinstance(report.longrepr, tuple) else ""
            _ACCEPTANCE[name] = ("N/A ", report.duration, reason.replace("Skipped: ", ""))
        else:
            _ACCEPTANCE[name] = ("PASS" if report.passed else "FAIL", report.duration, "")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")

    def order(name):
        digits = "".join(ch for ch in name.split("_")[2] if ch.isdigit()) if name.count("_") > 1 else ""
        return int(digits) if digits else 99

    for name in sorted(_ACCEPTANCE, key=order):
        status, dur, note = _ACCEPTANCE[name]
        line = f"{status}  {name:<48} {dur:7.2f}s"
        if note:
            line += f"  ({note})"
        tr.write_line(line)
