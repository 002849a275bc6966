"""Sound scalar interval arithmetic.

Two interchangeable modes are supported:

* ``WIDENED_FLOAT64`` keeps binary64 endpoints.  Every inexact operation is
  rounded outward to the nearest double below or above the real result
  (falling back to a one-step widening of the round-to-nearest value close to
  overflow and underflow), so it contains the real result under any hardware
  rounding mode.
* ``EXACT_RATIONAL`` keeps :class:`fractions.Fraction` endpoints.  Results
  from exact inputs are degenerate intervals equal to the real result.  It is
  slow and exists as a testing oracle.

The vectorised kernels used by the backsubstitution engine live in
:mod:`sparsepoly._kernels`; they share the rounding functions of
:mod:`sparsepoly._rounding` with the scalar functions here.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction
from numbers import Rational
from typing import Sequence, Union

import numpy as np

from . import _rounding as _r

Scalar = Union[float, Fraction]

INF = math.inf


class SoundnessMode(enum.Enum):
    WIDENED_FLOAT64 = "widened"
    EXACT_RATIONAL = "rational"

    @classmethod
    def parse(cls, value: "str | SoundnessMode") -> "SoundnessMode":
        if isinstance(value, cls):
            return value
        for mode in cls:
            if value in (mode.value, mode.name):
                return mode
        raise ValueError(f"unknown soundness mode {value!r}")


class ModeMismatchError(TypeError):
    """Raised when operands from different soundness modes are combined."""


def down(x: float) -> float:
    return math.nextafter(x, -INF)


def up(x: float) -> float:
    return math.nextafter(x, INF)


def outward(value: Rational | str | float) -> tuple[float, float]:
    """Smallest binary64 interval containing an exact value."""
    fr = Fraction(value)
    f = float(fr)
    if math.isinf(f):
        return (math.nextafter(f, 0.0), f) if f > 0 else (f, math.nextafter(f, 0.0))
    ef = Fraction(f)
    if ef == fr:
        return f, f
    if ef < fr:
        return f, up(f)
    return down(f), f


def _check_endpoint(x, mode: SoundnessMode):
    if mode is SoundnessMode.WIDENED_FLOAT64:
        if not isinstance(x, float):
            raise ModeMismatchError(f"expected float endpoint, got {type(x).__name__}")
        if math.isnan(x):
            raise ValueError("interval endpoint is NaN")
    elif not isinstance(x, Fraction):
        raise ModeMismatchError(f"expected Fraction endpoint, got {type(x).__name__}")


@dataclass(frozen=True)
class Interval:
    lo: Scalar
    hi: Scalar
    mode: SoundnessMode = SoundnessMode.WIDENED_FLOAT64

    def __post_init__(self):
        _check_endpoint(self.lo, self.mode)
        _check_endpoint(self.hi, self.mode)
        if self.lo > self.hi:
            raise ValueError(f"empty interval [{self.lo}, {self.hi}]")

    @classmethod
    def point(cls, value, mode: SoundnessMode = SoundnessMode.WIDENED_FLOAT64) -> "Interval":
        """Degenerate interval (float mode widens values that are not representable)."""
        if mode is SoundnessMode.EXACT_RATIONAL:
            fr = Fraction(value)
            return cls(fr, fr, mode)
        lo, hi = outward(value)
        return cls(lo, hi, mode)

    @classmethod
    def zero(cls, mode: SoundnessMode = SoundnessMode.WIDENED_FLOAT64) -> "Interval":
        z = Fraction(0) if mode is SoundnessMode.EXACT_RATIONAL else 0.0
        return cls(z, z, mode)

    def contains(self, value) -> bool:
        if isinstance(value, Interval):
            return Fraction(self.lo) <= Fraction(value.lo) and Fraction(value.hi) <= Fraction(self.hi)
        v = Fraction(value)
        return Fraction(self.lo) <= v <= Fraction(self.hi)

    @property
    def is_degenerate(self) -> bool:
        return self.lo == self.hi

    def __add__(self, other: "Interval") -> "Interval":
        return iv_add(self, other)

    def __mul__(self, other: "Interval") -> "Interval":
        return iv_mul(self, other)


def _same_mode(*ivs: Interval) -> SoundnessMode:
    mode = ivs[0].mode
    for iv in ivs[1:]:
        if iv.mode is not mode:
            raise ModeMismatchError(f"cannot combine {mode.value} and {iv.mode.value} intervals")
    return mode


# Float primitives: exact directed rounding, see :mod:`sparsepoly._rounding`.

def add_lo(a: float, b: float) -> float:
    return _r.add_lo(a, b)


def add_hi(a: float, b: float) -> float:
    return _r.add_hi(a, b)


def _corner(x: float, y: float) -> tuple[float, float]:
    return _r.mul_lo(x, y), _r.mul_hi(x, y)


def mul_float(alo: float, ahi: float, blo: float, bhi: float) -> tuple[float, float]:
    if alo == ahi:
        pairs = [(alo, blo)] if blo == bhi else [(alo, blo), (alo, bhi)]
    elif blo == bhi:
        pairs = [(alo, blo), (ahi, blo)]
    else:
        pairs = [(alo, blo), (alo, bhi), (ahi, blo), (ahi, bhi)]
    lo, hi = INF, -INF
    for x, y in pairs:
        plo, phi = _corner(x, y)
        lo = min(lo, plo)
        hi = max(hi, phi)
    return lo, hi


def iv_add(a: Interval, b: Interval) -> Interval:
    mode = _same_mode(a, b)
    if mode is SoundnessMode.EXACT_RATIONAL:
        return Interval(a.lo + b.lo, a.hi + b.hi, mode)
    return Interval(add_lo(a.lo, b.lo), add_hi(a.hi, b.hi), mode)


def iv_mul_scalar(a: Interval, w) -> Interval:
    """Multiply by an exact network weight.

    In float mode a weight that is not representable in binary64 is first
    enclosed in its outward interval, so the result still contains the exact
    product.
    """
    if a.mode is SoundnessMode.EXACT_RATIONAL:
        w = Fraction(w)
        x, y = a.lo * w, a.hi * w
        return Interval(min(x, y), max(x, y), a.mode)
    wlo, whi = outward(w)
    return Interval(*mul_float(a.lo, a.hi, wlo, whi), a.mode)


def iv_mul(a: Interval, b: Interval) -> Interval:
    mode = _same_mode(a, b)
    if mode is SoundnessMode.EXACT_RATIONAL:
        corners = [a.lo * b.lo, a.lo * b.hi, a.hi * b.lo, a.hi * b.hi]
        return Interval(min(corners), max(corners), mode)
    return Interval(*mul_float(a.lo, a.hi, b.lo, b.hi), mode)


def iv_dot(coeffs: Sequence[Interval], weights: Sequence, mode: SoundnessMode | None = None) -> Interval:
    """Interval dot product accumulated in ascending index order."""
    if len(coeffs) != len(weights):
        raise ValueError(f"length mismatch: {len(coeffs)} coefficients, {len(weights)} weights")
    if mode is None:
        mode = coeffs[0].mode if coeffs else SoundnessMode.WIDENED_FLOAT64
    acc = Interval.zero(mode)
    for c, w in zip(coeffs, weights):
        if c.mode is not mode:
            raise ModeMismatchError("mixed modes in iv_dot")
        acc = iv_add(acc, iv_mul_scalar(c, w))
    return acc


def iv_div(a: Interval, b: Interval) -> Interval:
    """Division by an interval that does not contain zero."""
    mode = _same_mode(a, b)
    if b.lo <= 0 <= b.hi:
        raise ZeroDivisionError("divisor interval contains zero")
    if mode is SoundnessMode.EXACT_RATIONAL:
        q = [a.lo / b.lo, a.lo / b.hi, a.hi / b.lo, a.hi / b.hi]
        return Interval(min(q), max(q), mode)
    lo, hi = INF, -INF
    for x in (a.lo, a.hi):
        for y in (b.lo, b.hi):
            if x == 0.0:
                lo, hi = min(lo, 0.0), max(hi, 0.0)
                continue
            q = x / y
            lo, hi = min(lo, down(q)), max(hi, up(q))
    return Interval(lo, hi, mode)


# Vectorised float helpers shared by the network evaluators.

def vdown(x: np.ndarray) -> np.ndarray:
    return np.nextafter(x, -np.inf)


def vup(x: np.ndarray) -> np.ndarray:
    return np.nextafter(x, np.inf)


vadd_lo = _r.vadd_lo
vadd_hi = _r.vadd_hi


def outward_array(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise :func:`outward` over an object array of exact values."""
    flat = values.ravel()
    lo = np.empty(flat.shape, dtype=np.float64)
    hi = np.empty(flat.shape, dtype=np.float64)
    for i, v in enumerate(flat):
        lo[i], hi[i] = outward(v)
    return lo.reshape(values.shape), hi.reshape(values.shape)
