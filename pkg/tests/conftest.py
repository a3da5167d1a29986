import numpy as np
import pytest

from dflgcn import kernels
from dflgcn.gradsuite import TINY_TOPOLOGY
from dflgcn.skeleton import SkeletonClip


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_topology():
    return TINY_TOPOLOGY


@pytest.fixture
def tiny_clip(tiny_topology, rng):
    pos = rng.normal(0, 0.3, (10, tiny_topology.num_joints, 3))
    return SkeletonClip(tiny_topology, pos, label=1)


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    with kernels.use_backend(request.param):
        yield request.param


_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_lines():
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
