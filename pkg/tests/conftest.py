import numpy as np
import pytest

from stablernn.numerics import Rng


def power_iteration_norm(m, iters=5000, seed=0):
    """Largest singular value by power iteration on m^T m."""
    v = np.random.default_rng(seed).standard_normal(m.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        w = m.T @ (m @ v)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        v = w / nw
        new = np.linalg.norm(m @ v)
        if abs(new - sigma) < 1e-15 * max(1.0, new):
            return new
        sigma = new
    return sigma


@pytest.fixture
def rng():
    return Rng(12345)
