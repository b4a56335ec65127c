import numpy as np
import pytest

from nnrk.systems import make_linear_system


@pytest.fixture
def growth():
    """x' = x with flow x e^t."""
    return make_linear_system(1.0)


@pytest.fixture
def decay():
    """x' = -x with flow x e^-t."""
    return make_linear_system(-1.0)


class ConstantNet:
    """Correction model returning the same vector everywhere."""

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)

    def __call__(self, x, p):
        return np.broadcast_to(self.value, np.shape(x)).copy()


class HalfStateNet:
    """Leading Euler local-error coefficient of x' = x: delta(x) = x / 2."""

    def __call__(self, x, p):
        return 0.5 * np.asarray(x, dtype=np.float64)
