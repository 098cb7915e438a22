import numpy as np
import pytest


def numeric_grad(f, x, h=1e-3):
    """Central differences of scalar ``f`` at every entry of ``x`` (modified in place, restored)."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(analytic, numeric, floor=1e-6):
    """Max-norm relative error between two gradient arrays.

    The denominator is floored so that gradients that are identically zero
    (e.g. a bias feeding batch norm) compare by absolute error.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0), np.abs(numeric).max(initial=0), floor)
    return float(np.abs(analytic - numeric).max() / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
