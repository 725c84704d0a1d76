import numpy as np
import pytest
import torch

from mave import numerics as nx


@pytest.fixture
def f64():
    """Run the test body in 64-bit test mode."""
    with nx.precision("test"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training / acceptance checks")
    torch.set_num_threads(1)


_ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def acceptance():
    """Record one acceptance-criterion outcome for the terminal summary."""

    def record(name: str, ok: bool, detail: str) -> None:
        _ACCEPTANCE[name] = (bool(ok), detail)

    return record


def pytest_runtest_logreport(report):
    # a criterion whose test crashed before recording still gets a line
    name = report.nodeid.rpartition("::test_")[2].split("_")[0].upper()
    if "test_acceptance.py" in report.nodeid and report.failed and name not in _ACCEPTANCE:
        _ACCEPTANCE[name] = (False, f"error during {report.when}")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[name]
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}: {detail}")
