import numpy as np
import pytest

from codanets import tensor as tn


@pytest.fixture(autouse=True)
def f64():
    """Tests run at 64-bit unless they switch precision themselves."""
    with tn.precision("f64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_grad(f, x, h=1e-4):
    """Central differences of the scalar function ``f`` at ``x`` (numpy array)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))
