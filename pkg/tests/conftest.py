import numpy as np
import pytest

from hsiconvlstm import backend


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=backend.available())
def kernel_backend(request):
    """Run the test once per importable kernel backend."""
    previous = backend.NAME
    backend.use(request.param)
    yield request.param
    backend.use(previous)
