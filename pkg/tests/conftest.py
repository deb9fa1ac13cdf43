import numpy as np
import pytest

from tensor_autodiff import set_default_dtype


@pytest.fixture(autouse=True)
def float64_tensors(monkeypatch):
    """Every test starts (and ends) in 64-bit precision with no thread cap."""
    monkeypatch.delenv("SSM_LAB_THREADS", raising=False)
    set_default_dtype(np.float64)
    yield
    set_default_dtype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
