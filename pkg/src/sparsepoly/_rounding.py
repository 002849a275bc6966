"""Directed rounding of binary64 sums and products.

``add_lo(a, b)`` is the largest double not above the real ``a + b`` (and so
on).  The round-to-nearest result is corrected using the exact rounding error,
obtained with TwoSum for sums and Dekker's split product for products.  Where
Dekker's product would overflow or lose bits to underflow, the operands are
split into mantissa and exponent first and the rounded product is compared
against the exact mantissa product.

These are numba functions; they are called from the kernels, from the scalar
interval operations and through the ufuncs at the bottom.
"""
import math

import numpy as np
from numba import njit, vectorize

_NINF = -np.inf
_PINF = np.inf
_MAX = np.finfo(np.float64).max
_SPLIT = 134217729.0          # 2**27 + 1
_BIG = 2.0 ** 995
_TINY = 2.0 ** -960


@njit
def _sum_err(a, b, s):
    bb = s - a
    return (a - (s - bb)) + (b - bb)


@njit
def _prod_err(x, y, p):
    c = _SPLIT * x
    xh = c - (c - x)
    xl = x - xh
    c = _SPLIT * y
    yh = c - (c - y)
    yl = y - yh
    return ((xh * yh - p) + xh * yl + xl * yh) + xl * yl


@njit
def _prod_dir(x, y, p):
    """Sign of ``p - x*y`` (real product), for finite nonzero ``x``, ``y``."""
    if abs(p) >= _TINY and abs(x) <= _BIG and abs(y) <= _BIG:
        return -np.sign(_prod_err(x, y, p))
    mx, ex = math.frexp(x)
    my, ey = math.frexp(y)
    pm = mx * my
    em = _prod_err(mx, my, pm)
    # p scaled back next to pm is exact; the difference is exact or far from em
    d = math.ldexp(p, -(ex + ey)) - pm
    return np.sign(d - em)


@njit
def add_lo(a, b):
    s = a + b
    if s - s != 0.0:
        # +inf from two finite operands is an overflow; the real sum is finite
        if s == _PINF and a != _PINF and b != _PINF:
            return _MAX
        return s
    e = _sum_err(a, b, s)
    if e < 0.0 or e != e:
        return np.nextafter(s, _NINF)
    return s + 0.0


@njit
def add_hi(a, b):
    s = a + b
    if s - s != 0.0:
        if s == _NINF and a != _NINF and b != _NINF:
            return -_MAX
        return s
    e = _sum_err(a, b, s)
    if e > 0.0 or e != e:
        return np.nextafter(s, _PINF)
    return s + 0.0


@njit
def mul_lo(x, y):
    if x == 0.0 or y == 0.0:
        return 0.0
    p = x * y
    if p - p != 0.0:
        if p == _PINF and abs(x) != _PINF and abs(y) != _PINF:
            return _MAX
        return p
    if _prod_dir(x, y, p) > 0.0:
        return np.nextafter(p, _NINF)
    return p


@njit
def mul_hi(x, y):
    if x == 0.0 or y == 0.0:
        return 0.0
    p = x * y
    if p - p != 0.0:
        if p == _NINF and abs(x) != _PINF and abs(y) != _PINF:
            return -_MAX
        return p
    if _prod_dir(x, y, p) < 0.0:
        return np.nextafter(p, _PINF)
    return p


@vectorize(["float64(float64, float64)"], nopython=True)
def vadd_lo(a, b):
    return add_lo(a, b)


@vectorize(["float64(float64, float64)"], nopython=True)
def vadd_hi(a, b):
    return add_hi(a, b)
