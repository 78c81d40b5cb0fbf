import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from kpgmrf.panel import PanelData  # noqa: E402


def make_panel(values, region, first_year=2011, last_year=2021, codes=None):
    """Panel from an (N, 3, T) array with NaN for missing cells."""
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    y = values.ravel()
    mask = ~np.isnan(y)
    codes = codes or tuple(f"C{i + 1:02d}" for i in range(n))
    return PanelData(tuple(codes), np.asarray(region, dtype=np.int64), first_year, last_year, y, mask)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def toy_panel():
    """Three countries, partly observed, regions 0, 3, 3."""
    r = np.random.default_rng(7)
    vals = r.normal(-3.0, 0.7, (3, 3, 11))
    drop = r.random((3, 3, 11)) < 0.6
    vals[drop] = np.nan
    vals[2] = np.nan
    vals[2, 1, 4] = -2.5
    return make_panel(vals, [0, 3, 3])


# --------------------------------------------------------------------------
# one PASS/FAIL line per acceptance criterion in the terminal summary

_CRITERIA = []


def pytest_runtest_logreport(report):
    if "test_acceptance.py::" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        props = dict(report.user_properties)
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _CRITERIA.append((props.get("criterion", report.nodeid.split("::")[-1]), status,
                          props.get("detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in _CRITERIA:
        terminalreporter.write_line(f"{status} {name}" + (f"  [{detail}]" if detail else ""))
