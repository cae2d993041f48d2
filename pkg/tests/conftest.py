import sys

import numpy as np
import pytest

from echocp.bench import bench_nfz5
from echocp.ech import EchConfig, run, run_standard


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def bench():
    return bench_nfz5()


@pytest.fixture(scope="session")
def ech_run(bench):
    prob, mesh, _ = bench
    return run(prob, mesh, EchConfig())


@pytest.fixture(scope="session")
def standard_run(bench):
    prob, mesh, _ = bench
    return run_standard(prob, mesh, EchConfig())


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
