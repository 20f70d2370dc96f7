import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gped.special import digamma, lgamma

GRID = np.concatenate([np.linspace(1e-3, 1, 200), np.linspace(1, 100, 800)])


def test_lgamma_matches_high_precision():
    ref = np.array([float(mpmath.loggamma(mpmath.mpf(x))) for x in GRID])
    err = np.abs(lgamma(GRID) - ref) / np.maximum(1.0, np.abs(ref))
    assert err.max() < 1e-10


def test_digamma_matches_high_precision():
    ref = np.array([float(mpmath.digamma(mpmath.mpf(x))) for x in GRID])
    err = np.abs(digamma(GRID) - ref) / np.maximum(1.0, np.abs(ref))
    assert err.max() < 1e-10


def test_known_values():
    assert lgamma(1.0) == pytest.approx(0.0, abs=1e-14)
    assert lgamma(4.0) == pytest.approx(np.log(6.0), abs=1e-13)
    assert digamma(1.0) == pytest.approx(-0.5772156649015329, abs=1e-14)
    # psi(3) - psi(2) = 1/2
    assert digamma(3.0) - digamma(2.0) == pytest.approx(0.5, abs=1e-14)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-2, 50.0))
def test_recurrences(x):
    assert lgamma(x + 1) - lgamma(x) == pytest.approx(np.log(x), abs=1e-11)
    assert digamma(x + 1) - digamma(x) == pytest.approx(1.0 / x, rel=1e-11, abs=1e-11)


def test_nonpositive_rejected():
    with pytest.raises(ValueError):
        lgamma(0.0)
    with pytest.raises(ValueError):
        digamma(-1.0)
