import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, special

from cran_delay.numerics import (
    Bracket,
    NoSignChangeError,
    bisect_decreasing,
    e1_or_zero,
    exp_integral_e1,
    root_find_monotone,
    scaled_e1,
)


def quad_e1(z):
    # independent oracle: integrate e^-t/t after the substitution t = z/u
    val, _ = integrate.quad(lambda u: np.exp(-z / u) / u, 0.0, 1.0, epsabs=0, epsrel=1e-13,
                            limit=200)
    return val


@pytest.mark.parametrize("z", [1e-6, 0.1, 0.5, 1.0, 2.4, 2.6, 5.0, 10.0, 30.0])
def test_e1_matches_quadrature(z):
    assert exp_integral_e1(z) == pytest.approx(quad_e1(z), rel=1e-11)


def test_e1_known_values():
    assert exp_integral_e1(1.0) == pytest.approx(0.21938393439552062, rel=1e-14)
    assert exp_integral_e1(0.1) == pytest.approx(1.8229239584193906, rel=1e-14)


def test_e1_against_scipy_over_range():
    z = np.geomspace(1e-8, 700, 20001)
    rel = np.abs(exp_integral_e1(z) / special.exp1(z) - 1)
    assert rel.max() < 1e-13


def test_e1_rejects_nonpositive():
    for z in (0.0, -1.0, np.nan):
        with pytest.raises(ValueError):
            exp_integral_e1(z)


def test_e1_small_argument_asymptote():
    z = 1e-10
    assert exp_integral_e1(z) == pytest.approx(-np.euler_gamma - np.log(z) + z, rel=1e-14)


def test_scaled_e1_large_argument():
    # e^z E1(z) -> 1/z (1 - 1/z + 2/z^2 ...) for large z
    z = 1e6
    assert scaled_e1(z) == pytest.approx(1 / z * (1 - 1 / z + 2 / z**2), rel=1e-12)
    assert np.isfinite(scaled_e1(1e300))


def test_e1_or_zero_infinity():
    assert e1_or_zero(np.inf) == 0.0
    np.testing.assert_allclose(e1_or_zero(np.array([1.0, np.inf])), [special.exp1(1.0), 0.0])


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-6, 50.0), st.floats(1e-6, 50.0))
def test_e1_strictly_decreasing(a, b):
    if a == b:
        return
    lo, hi = min(a, b), max(a, b)
    assert exp_integral_e1(lo) > exp_integral_e1(hi)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 100.0))
def test_e1_bounds(z):
    # (1/2) e^-z ln(1 + 2/z) < E1(z) < e^-z ln(1 + 1/z)
    e = exp_integral_e1(z)
    assert 0.5 * np.exp(-z) * np.log1p(2 / z) < e < np.exp(-z) * np.log1p(1 / z)


def test_root_find_linear_and_cubic():
    assert root_find_monotone(lambda x: x - 0.3, (0, 1)) == pytest.approx(0.3, abs=1e-8)
    r = root_find_monotone(lambda x: x**3 - 2, (0, 2), tol=1e-12)
    assert r == pytest.approx(2 ** (1 / 3), rel=1e-11)


def test_root_find_no_sign_change():
    with pytest.raises(NoSignChangeError) as info:
        root_find_monotone(lambda x: x * x + 1, (0, 1))
    assert info.value.f_lo == 1.0 and info.value.f_hi == 2.0


def test_bracket_validation():
    with pytest.raises(ValueError):
        Bracket(1.0, 0.0, 1.0, -1.0)
    assert Bracket.of(lambda x: x - 0.5, 0, 1).valid


def test_bisect_decreasing_vectorized():
    targets = np.array([0.1, 0.5, 2.0])
    root = bisect_decreasing(lambda x: targets - x, np.zeros(3), np.full(3, 4.0))
    np.testing.assert_allclose(root, targets, rtol=1e-14)
