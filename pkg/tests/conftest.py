import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def fd_grad(fn, params, step=1e-6):
    """Central finite-difference gradient of a scalar function of a flat vector."""
    params = np.asarray(params, dtype=np.float64)
    g = np.empty_like(params)
    for i in range(params.size):
        e = np.zeros_like(params)
        e[i] = step
        g[i] = (fn(params + e) - fn(params - e)) / (2 * step)
    return g


_criteria = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::" not in report.nodeid:
        return
    props = dict(report.user_properties)
    key = report.nodeid.split("::")[-1].removeprefix("test_")
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        detail = props.get("detail", "")
        if report.outcome == "skipped" and isinstance(report.longrepr, tuple):
            detail = report.longrepr[2]
        _criteria[key] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for key in sorted(_criteria):
        status, detail = _criteria[key]
        terminalreporter.write_line(f"{key:<34} {status}  {detail}")
