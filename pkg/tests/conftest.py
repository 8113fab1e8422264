"""
Shared fixtures
"""

import numpy as np
import pytest

from autodiff import set_precision
from cache import get_cache


@pytest.fixture(autouse=True)
def float64_profile():
    """Every test runs in the 64-bit profile with an empty computation cache"""
    set_precision("float64")
    get_cache().clear()
    yield
    set_precision("float64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
