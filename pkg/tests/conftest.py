import numpy as np
import pytest

from tokenvos.autodiff import set_precision


@pytest.fixture(autouse=True)
def float64_mode():
    """Correctness tests run in 64-bit mode."""
    set_precision("float64")
    yield
    set_precision("float64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
