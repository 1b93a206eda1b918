import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def central_diff(f, x, h=1e-6):
    """Central finite-difference Jacobian of f at x (any output shape)."""
    x = np.asarray(x, dtype=np.float64)
    f0 = np.asarray(f(x))
    out = np.empty(f0.shape + (x.size,))
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        out[..., i] = (np.asarray(f(xp)) - np.asarray(f(xm))) / (2.0 * h)
    return out


def rel_err(approx, exact):
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    denom = max(np.linalg.norm(exact.ravel()), 1e-12)
    return np.linalg.norm((approx - exact).ravel()) / denom
