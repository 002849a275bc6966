"""Array-level interval arithmetic backends.

An interval array is a pair ``(lo, hi)`` of equally shaped numpy arrays.
:class:`FloatArith` stores binary64 endpoints and delegates the heavy loops
to the numba kernels; :class:`ExactArith` stores ``gmpy2.mpq`` objects in
object arrays, where ``lo is hi`` for every array it produces.

Both backends expose the same methods so the backsubstitution engine is
written once.
"""
from __future__ import annotations

from fractions import Fraction

import gmpy2
import numpy as np

from . import _kernels as K
from .interval import SoundnessMode, outward_array, vdown, vup, vadd_hi, vadd_lo

MPQ_ZERO = gmpy2.mpq(0)
MPQ_ONE = gmpy2.mpq(1)

_UNIT_ROUNDOFF = 2.0 ** -52   # worst case relative error of one directed-rounding op
_SUBNORMAL = 2.0 ** -1074


class FloatArith:
    mode = SoundnessMode.WIDENED_FLOAT64
    dtype = np.float64

    def scalar(self, value) -> float:
        return float(value)

    def zeros(self, shape):
        return np.zeros(shape), np.zeros(shape)

    def full_bounds(self, shape, value):
        return np.full(shape, float(value))

    def from_exact(self, values: np.ndarray):
        return outward_array(values)

    def point(self, values: np.ndarray):
        a = np.asarray(values, dtype=np.float64)
        return a, a

    def to_fraction(self, x) -> Fraction:
        return Fraction(float(x))

    def copy(self, ia):
        return ia[0].copy(), ia[1].copy()

    def add(self, a, b):
        return vadd_lo(a[0], b[0]), vadd_hi(a[1], b[1])

    add_bounds = add

    def matmul(self, m, w, out=None):
        lo, hi = out if out is not None else self.zeros((m[0].shape[0], w[0].shape[1]))
        K.matmul(np.ascontiguousarray(m[0]), np.ascontiguousarray(m[1]), w[0], w[1], lo, hi)
        return lo, hi

    def rowdot(self, m, b, acc):
        lo, hi = acc[0].copy(), acc[1].copy()
        K.rowdot(np.ascontiguousarray(m[0]), np.ascontiguousarray(m[1]), b[0], b[1], lo, hi)
        return lo, hi

    def gbc(self, m, f, stride):
        R, Ww, Wh, _ = m[0].shape
        fw, fh, cin, _ = f[0].shape
        shape = (R, (Ww - 1) * stride[0] + fw, (Wh - 1) * stride[1] + fh, cin)
        lo, hi = self.zeros(shape)
        K.gbc(np.ascontiguousarray(m[0]), np.ascontiguousarray(m[1]), f[0], f[1],
              stride[0], stride[1], lo, hi)
        return lo, hi

    def relu_subst(self, c, relax, upper: bool, const):
        alpha, beta, gamma, delta = relax
        out_lo, out_hi = self.zeros(c[0].shape)
        k_lo, k_hi = const[0].copy(), const[1].copy()
        K.relu_subst(np.ascontiguousarray(c[0]), np.ascontiguousarray(c[1]),
                     alpha[0], alpha[1], beta[0], beta[1], gamma[0], gamma[1],
                     delta[0], delta[1], upper, out_lo, out_hi, k_lo, k_hi)
        return (out_lo, out_hi), (k_lo, k_hi)

    def concretize(self, c, xl, xu, const, upper: bool):
        out = np.empty(c[0].shape[0])
        K.concretize(np.ascontiguousarray(c[0]), np.ascontiguousarray(c[1]),
                     np.ascontiguousarray(xl), np.ascontiguousarray(xu),
                     const[0], const[1], upper, out)
        return out

    def csr_interval(self, csr, w, bias, xl, xu):
        n = csr.indptr.shape[0] - 1
        out_l = np.empty(n)
        out_u = np.empty(n)
        K.csr_interval(csr.indptr, csr.indices, w[0], w[1], bias[0], bias[1],
                       np.ascontiguousarray(xl), np.ascontiguousarray(xu), out_l, out_u)
        return out_l, out_u

    def rounding_error(self, csr, w, bias, xl, xu):
        """Bound on |float evaluation - real evaluation| of each affine neuron.

        Covers any summation order and any rounding mode: gamma_k * sum|terms|
        plus an absolute underflow allowance, with k = terms + 1.
        """
        mag = np.maximum(np.abs(xl), np.abs(xu))
        wabs = np.maximum(np.abs(w[0]), np.abs(w[1]))
        babs = np.maximum(np.abs(bias[0]), np.abs(bias[1]))
        _, total = self.csr_interval(csr, (wabs, wabs), (babs, babs), mag, mag)
        k = np.diff(csr.indptr).astype(np.float64) + 1.0
        kd = k * _UNIT_ROUNDOFF
        gamma = vup(kd / (1.0 - kd))
        return vup(vup(gamma * total) + 2.0 * k * _SUBNORMAL)

    def widen(self, b, err):
        if err is None:
            return b
        return vdown(b[0] - err), vup(b[1] + err)

    def relu_bounds(self, l, u):
        return np.maximum(l, 0.0), np.maximum(u, 0.0)

    def relaxation(self, l, u):
        """Interval-valued (alpha, beta, gamma, delta) for every neuron."""
        n = l.shape[0]
        alpha = np.zeros(n)
        gamma_lo = np.zeros(n)
        gamma_hi = np.zeros(n)
        delta_lo = np.zeros(n)
        delta_hi = np.zeros(n)
        pos = l >= 0.0
        unstable = ~pos & (u > 0.0)
        alpha[pos] = 1.0
        gamma_lo[pos] = 1.0
        gamma_hi[pos] = 1.0
        lu, uu = l[unstable], u[unstable]
        width_lo = vdown(uu - lu)
        width_hi = vup(uu - lu)
        glo = vdown(uu / width_hi)
        ghi = vup(uu / width_lo)
        gamma_lo[unstable] = glo
        gamma_hi[unstable] = ghi
        delta_lo[unstable] = vdown(-lu * glo)
        delta_hi[unstable] = vup(-lu * ghi)
        alpha[unstable] = np.where(uu > -lu, 1.0, 0.0)
        zero = np.zeros(n)
        return (alpha, alpha), (zero, zero), (gamma_lo, gamma_hi), (delta_lo, delta_hi)

    def minimum(self, a, b):
        return np.minimum(a, b)

    def maximum(self, a, b):
        return np.maximum(a, b)


def _mpq_array(values) -> np.ndarray:
    arr = np.asarray(values, dtype=object)
    out = np.empty(arr.shape, dtype=object)
    flat_in, flat_out = arr.ravel(), out.ravel()
    for i, v in enumerate(flat_in):
        flat_out[i] = gmpy2.mpq(Fraction(v)) if not isinstance(v, type(MPQ_ZERO)) else v
    return out


class ExactArith:
    mode = SoundnessMode.EXACT_RATIONAL
    dtype = object

    def scalar(self, value):
        return gmpy2.mpq(Fraction(value))

    def zeros(self, shape):
        z = np.full(shape, MPQ_ZERO, dtype=object)
        return z, z

    def full_bounds(self, shape, value):
        return np.full(shape, self.scalar(value), dtype=object)

    def from_exact(self, values: np.ndarray):
        a = _mpq_array(values)
        return a, a

    point = from_exact

    def to_fraction(self, x) -> Fraction:
        x = gmpy2.mpq(x)
        return Fraction(int(x.numerator), int(x.denominator))

    def copy(self, ia):
        a = ia[0].copy()
        return a, a

    def add(self, a, b):
        s = a[0] + b[0]
        return s, s

    def add_bounds(self, a, b):
        """Sum of two bound pairs ``(l, u)``, which unlike coefficients are not degenerate."""
        return a[0] + b[0], a[1] + b[1]

    def matmul(self, m, w, out=None):
        r = m[0].dot(w[0])
        if out is not None:
            r = out[0] + r
        return r, r

    def rowdot(self, m, b, acc):
        r = acc[0] + (m[0] * b[0]).sum(axis=1)
        return r, r

    def gbc(self, m, f, stride):
        R, Ww, Wh, cout = m[0].shape
        fw, fh, cin, _ = f[0].shape
        sw, sh = stride
        out = np.full((R, (Ww - 1) * sw + fw, (Wh - 1) * sh + fh, cin), MPQ_ZERO, dtype=object)
        coeffs, filt = m[0], f[0]
        for fi in range(fw):
            for gi in range(fh):
                view = out[:, fi:fi + (Ww - 1) * sw + 1:sw, gi:gi + (Wh - 1) * sh + 1:sh, :]
                for d in range(cout):
                    view += coeffs[:, :, :, d, None] * filt[fi, gi, :, d]
        return out, out

    def relu_subst(self, c, relax, upper: bool, const):
        alpha, beta, gamma, delta = (r[0] for r in relax)
        coeff = c[0]
        pos = coeff >= 0
        if upper:
            slope = np.where(pos, gamma, alpha)
            offset = np.where(pos, delta, beta)
        else:
            slope = np.where(pos, alpha, gamma)
            offset = np.where(pos, beta, delta)
        new = coeff * slope
        k = const[0] + (coeff * offset).sum(axis=1)
        return (new, new), (k, k)

    def concretize(self, c, xl, xu, const, upper: bool):
        coeff = c[0]
        pos = coeff >= 0
        x = np.where(pos, xu, xl) if upper else np.where(pos, xl, xu)
        return const[0] + (coeff * x).sum(axis=1)

    def csr_interval(self, csr, w, bias, xl, xu):
        wt = w[0]
        pos = wt >= 0
        xlo, xhi = xl[csr.indices], xu[csr.indices]
        lo_terms = wt * np.where(pos, xlo, xhi)
        hi_terms = wt * np.where(pos, xhi, xlo)
        return bias[0] + _segment_sum(lo_terms, csr.indptr), bias[0] + _segment_sum(hi_terms, csr.indptr)

    def rounding_error(self, csr, w, bias, xl, xu):
        return None

    def widen(self, b, err):
        return b

    def relu_bounds(self, l, u):
        return (np.where(l >= 0, l, MPQ_ZERO).astype(object),
                np.where(u >= 0, u, MPQ_ZERO).astype(object))

    def relaxation(self, l, u):
        n = l.shape[0]
        alpha = np.full(n, MPQ_ZERO, dtype=object)
        gamma = np.full(n, MPQ_ZERO, dtype=object)
        delta = np.full(n, MPQ_ZERO, dtype=object)
        beta = np.full(n, MPQ_ZERO, dtype=object)
        for i in range(n):
            li, ui = l[i], u[i]
            if li >= 0:
                alpha[i] = MPQ_ONE
                gamma[i] = MPQ_ONE
            elif ui > 0:
                g = ui / (ui - li)
                gamma[i] = g
                delta[i] = -li * g
                alpha[i] = MPQ_ONE if ui > -li else MPQ_ZERO
        return (alpha, alpha), (beta, beta), (gamma, gamma), (delta, delta)

    def minimum(self, a, b):
        return np.where(b < a, b, a).astype(object)

    def maximum(self, a, b):
        return np.where(b > a, b, a).astype(object)


def _segment_sum(terms: np.ndarray, indptr: np.ndarray) -> np.ndarray:
    n = indptr.shape[0] - 1
    out = np.full(n, MPQ_ZERO, dtype=object)
    for i in range(n):
        a, b = indptr[i], indptr[i + 1]
        if b > a:
            out[i] = terms[a:b].sum()
    return out


def arith_for(mode) -> FloatArith | ExactArith:
    mode = SoundnessMode.parse(mode)
    return FloatArith() if mode is SoundnessMode.WIDENED_FLOAT64 else ExactArith()
