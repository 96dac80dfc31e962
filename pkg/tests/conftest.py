"""Shared fixtures; pins BLAS threading before numpy loads for determinism."""

import os

for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def rng64():
    """Separate generator so float64 gradient checks stay order-independent."""
    return np.random.default_rng(1234)
