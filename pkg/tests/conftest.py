import numpy as np
import pytest

from mpcrl_rm.metanet import MetanetParams, NetworkTopology
from mpcrl_rm.mpc import HorizonConfig, build_parametric_mpc


@pytest.fixture(scope="session")
def topo():
    return NetworkTopology.benchmark()


@pytest.fixture(scope="session")
def params():
    return MetanetParams()


@pytest.fixture(scope="session")
def mpc(topo, params):
    """Default-horizon benchmark MPC, built once per session."""
    return build_parametric_mpc(topo, params, HorizonConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from support import REPORT

    if REPORT:
        terminalreporter.section("acceptance criteria")
        for line in sorted(REPORT, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
