"""Special functions and root finding shared by the priority solvers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import brentq

EULER_GAMMA = 0.57721566490153286061

_SERIES_TERMS = 40
_CF_MAX_ITER = 400
_CF_EPS = 4e-16
_SWITCH = 2.5


class NoSignChangeError(ValueError):
    """Raised when a bracket does not straddle a root."""

    def __init__(self, lo, hi, f_lo, f_hi):
        self.lo, self.hi, self.f_lo, self.f_hi = lo, hi, f_lo, f_hi
        super().__init__(
            f"no sign change on [{lo!r}, {hi!r}]: f(lo)={f_lo!r}, f(hi)={f_hi!r}"
        )


@dataclass(frozen=True)
class Bracket:
    lo: float
    hi: float
    f_lo: float
    f_hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"bracket needs lo < hi, got {self.lo}, {self.hi}")

    @property
    def valid(self) -> bool:
        return self.f_lo * self.f_hi <= 0

    @classmethod
    def of(cls, f: Callable[[float], float], lo: float, hi: float) -> "Bracket":
        return cls(lo, hi, float(f(lo)), float(f(hi)))


def _e1_series(z):
    # E1(z) = -gamma - ln z - sum_{k>=1} (-z)^k / (k k!)
    term = np.ones_like(z)
    acc = np.zeros_like(z)
    zmax = float(np.max(z)) if z.size else 0.0
    mag = 1.0
    for k in range(1, _SERIES_TERMS + 1):
        term = term * (-z) / k
        acc = acc + term / k
        mag = mag * zmax / k
        if mag / k < 1e-17:
            break
    return -EULER_GAMMA - np.log(z) - acc


def _scaled_e1_cf(z):
    # e^z E1(z) by modified Lentz on the continued fraction
    # 1/(z+1-) 1/(z+3-) 4/(z+5-) ...
    b = z + 1.0
    c = np.full_like(z, 1.0 / 1e-300)
    d = 1.0 / b
    h = d.copy()
    for i in range(1, _CF_MAX_ITER + 1):
        an = -float(i * i)
        b = b + 2.0
        d = 1.0 / (an * d + b)
        c = b + an / c
        delta = c * d
        h = h * delta
        if np.all(np.abs(delta - 1.0) < _CF_EPS):
            break
    return h


def exp_integral_e1(z):
    """Exponential integral E1(z) = int_z^inf e^-t / t dt for real z > 0.

    Power series up to z = 2.5, continued fraction above; relative error is
    below 1e-13 over the whole positive axis. Accepts scalars or arrays.
    """
    arr = np.asarray(z, dtype=float)
    if np.any(~(arr > 0)):
        raise ValueError("exp_integral_e1 is defined for z > 0 only")
    out = np.empty_like(arr)
    small = arr <= _SWITCH
    if np.any(small):
        out[small] = _e1_series(arr[small])
    if np.any(~small):
        big = arr[~small]
        out[~small] = np.exp(-big) * _scaled_e1_cf(big)
    return out if out.ndim else float(out)


def scaled_e1(z):
    """e^z * E1(z), finite for large z where the two factors over/underflow."""
    arr = np.asarray(z, dtype=float)
    if np.any(~(arr > 0)):
        raise ValueError("scaled_e1 is defined for z > 0 only")
    out = np.empty_like(arr)
    small = arr <= _SWITCH
    if np.any(small):
        out[small] = np.exp(arr[small]) * _e1_series(arr[small])
    if np.any(~small):
        out[~small] = _scaled_e1_cf(arr[~small])
    return out if out.ndim else float(out)


def e1_or_zero(z):
    """E1 with the convention E1(+inf) = 0, handy for never-reached thresholds."""
    arr = np.asarray(z, dtype=float)
    out = np.zeros_like(arr)
    fin = np.isfinite(arr)
    if np.any(fin):
        out[fin] = exp_integral_e1(arr[fin])
    return out if out.ndim else float(out)


def root_find_monotone(
    f: Callable[[float], float],
    bracket: Bracket | tuple[float, float],
    tol: float = 1e-8,
) -> float:
    """Root of a continuous monotone function on a sign-change bracket.

    Uses Brent's method (bisection-safeguarded), stopping when the interval
    width drops below ``tol * max(1, |x|)``.
    """
    if not isinstance(bracket, Bracket):
        bracket = Bracket.of(f, *bracket)
    if bracket.f_lo == 0.0:
        return bracket.lo
    if bracket.f_hi == 0.0:
        return bracket.hi
    if not bracket.valid or not np.isfinite(bracket.f_lo * bracket.f_hi):
        raise NoSignChangeError(bracket.lo, bracket.hi, bracket.f_lo, bracket.f_hi)
    return float(brentq(f, bracket.lo, bracket.hi, xtol=tol, rtol=max(tol, 4e-16),
                        maxiter=500))


def bisect_decreasing(f, lo, hi, iters: int = 200, rtol: float = 1e-15):
    """Vectorized bisection for elementwise-decreasing ``f`` with f(lo) >= 0 >= f(hi).

    ``lo`` and ``hi`` are arrays of matching shape; every element is refined
    in lockstep, which is what the grid solvers need.
    """
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        pos = f(mid) > 0
        lo = np.where(pos, mid, lo)
        hi = np.where(pos, hi, mid)
        if np.all(hi - lo <= rtol * np.maximum(1.0, np.abs(hi))):
            break
    return 0.5 * (lo + hi)
