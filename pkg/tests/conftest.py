import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def central_diff(f, x0, h=1e-6):
    """Finite-difference gradient of scalar f at x0, one coordinate at a time."""
    x0 = np.asarray(x0, dtype=np.float64)
    out = np.zeros_like(x0)
    for idx in np.ndindex(x0.shape):
        xp = x0.copy()
        xp[idx] += h
        xm = x0.copy()
        xm[idx] -= h
        out[idx] = (f(xp) - f(xm)) / (2.0 * h)
    return out


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(a))))
