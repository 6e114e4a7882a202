import numpy as np
import pytest

from dualflow.autodiff import using_dtype


@pytest.fixture
def f64():
    """Run a test under the float64 verification build."""
    with using_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(0)
