"""Independent reference computations shared by the tests."""

import numpy as np


def finite_diff(f, x, eps=1e-6):
    """Central-difference gradient of the scalar function ``f`` at ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + eps
        fp = f(x)
        x[i] = old - eps
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g
