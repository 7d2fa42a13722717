import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _fixed_seed():
    torch.manual_seed(0)
    np.random.seed(0)
    yield


@pytest.fixture
def gen64():
    g = torch.Generator()
    g.manual_seed(1234)
    return g
