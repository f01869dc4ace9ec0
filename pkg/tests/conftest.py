import numpy as np
import pytest
import torch

from ufem import backbone, data, synth

torch.use_deterministic_algorithms(True)


@pytest.fixture(scope="session")
def init_handle():
    return backbone.load_backbone("tinyvgg", "init", seed=0)


@pytest.fixture(scope="session")
def bundled():
    return backbone.load_backbone("tinyvgg", "bundled")


@pytest.fixture(scope="session")
def shapes_small():
    x, y = synth.make_dataset(2, seed=11)
    return data.to_tensor(x), torch.as_tensor(y)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
