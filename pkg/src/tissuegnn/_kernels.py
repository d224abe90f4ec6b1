"""Vectorized elementwise helpers for the hot activation paths."""

import numpy as np


def swish_forward(x):
    """Returns (sigmoid(x), x * sigmoid(x)); overflow saturates cleanly."""
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-x))
    return s, x * s


def swish_backward(g, x, s):
    # d/dv v*s(v) = s * (1 + v * (1 - s))
    t = 1.0 - s
    t *= x
    t += 1.0
    t *= s
    t *= g
    return t


def relu_forward(x):
    return np.where(x > 0, x, 0.0)


def relu_backward(g, x):
    return np.where(x > 0, g, 0.0)
