import pytest

from atomicbench import timing, topology
from atomicbench.harness import Runner


@pytest.fixture(scope="session")
def host_desc():
    try:
        return topology.detect()
    except Exception:
        pytest.skip("host topology unavailable")


@pytest.fixture(scope="session")
def cal():
    return timing.calibrate(min_span_ns=25_000_000)


@pytest.fixture(scope="session")
def runner(host_desc, cal):
    with Runner(host_desc, cal) as r:
        yield r
