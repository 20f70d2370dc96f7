"""Log-gamma and digamma for positive real arguments (vectorized)."""

import math

import numpy as np

_lgamma_scalar = np.frompyfunc(math.lgamma, 1, 1)


def lgamma(x):
    """ln Gamma(x) for x > 0 (elementwise ``math.lgamma``)."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0):
        raise ValueError("lgamma is only defined here for positive arguments")
    return np.asarray(_lgamma_scalar(x), dtype=np.float64)


def digamma(x):
    """psi(x) = d/dx ln Gamma(x) for x > 0, via upward recurrence and the asymptotic series."""
    x = np.array(x, dtype=np.float64)
    if np.any(x <= 0):
        raise ValueError("digamma is only defined here for positive arguments")
    shift = np.zeros_like(x)
    while True:
        low = x < 10.0
        if not np.any(low):
            break
        shift = shift - np.where(low, 1.0 / np.where(low, x, 1.0), 0.0)
        x = np.where(low, x + 1.0, x)
    inv2 = 1.0 / (x * x)
    series = inv2 * (
        1.0 / 12
        - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (1.0 / 240 - inv2 * (1.0 / 132 - inv2 * 691.0 / 32760))))
    )
    return shift + np.log(x) - 0.5 / x - series
