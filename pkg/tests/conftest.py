import numpy as np
import pytest
import torch
from hypothesis import settings

from steercnp.groups import parse_group, standard

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

torch.set_num_threads(1)

GROUPS = ["C1", "C2", "C3", "C4", "C8", "D1", "D2", "D4", "D6"]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def c4_std():
    return standard(parse_group("C4"))


@pytest.fixture
def d4_std():
    return standard(parse_group("D4"))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
