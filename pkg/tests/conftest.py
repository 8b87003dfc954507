import numpy as np
import pytest


def finite_difference(f, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar f() w.r.t. the entries of x.

    f must recompute its value from x's current contents; x is restored.
    """
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        fp = f()
        x[idx] = orig - step
        fm = f()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * step)
    return grad


def assert_close(actual, expected, rtol=1e-4, atol=1e-7, label=""):
    actual = np.asarray(actual)
    expected = np.asarray(expected)
    if not np.allclose(actual, expected, rtol=rtol, atol=atol):
        err = np.abs(actual - expected).max()
        raise AssertionError(f"{label} max abs err {err:.3e}\nactual={actual}\nexpected={expected}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
