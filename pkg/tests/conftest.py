import numpy as np
import pytest

from cxrkit import tensor as T


@pytest.fixture
def float64_mode():
    """Run a test with float64 tensor storage for tight finite-difference
    comparisons."""
    with T.use_dtype(np.float64):
        yield
