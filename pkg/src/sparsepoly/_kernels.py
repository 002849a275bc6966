"""Numba kernels for widened-float interval arithmetic.

Each kernel parallelises over independent rows with ``prange`` and keeps a
fixed, sequential accumulation order inside a row, so results are bit
identical for any thread count.
"""
import numpy as np
from numba import njit, prange

from ._rounding import add_hi, add_lo, mul_hi, mul_lo

_add_lo = add_lo
_add_hi = add_hi
_corner_lo = mul_lo
_corner_hi = mul_hi


@njit
def _mul(alo, ahi, blo, bhi):
    if alo == 0.0 and ahi == 0.0:
        return 0.0, 0.0
    if blo == bhi:
        if alo == ahi:
            return _corner_lo(alo, blo), _corner_hi(alo, blo)
        if blo >= 0.0:
            return _corner_lo(alo, blo), _corner_hi(ahi, blo)
        return _corner_lo(ahi, blo), _corner_hi(alo, blo)
    lo = min(min(_corner_lo(alo, blo), _corner_lo(alo, bhi)),
             min(_corner_lo(ahi, blo), _corner_lo(ahi, bhi)))
    hi = max(max(_corner_hi(alo, blo), _corner_hi(alo, bhi)),
             max(_corner_hi(ahi, blo), _corner_hi(ahi, bhi)))
    return lo, hi


@njit(parallel=True, cache=True)
def matmul(mlo, mhi, wlo, whi, out_lo, out_hi):
    """out += M @ W with M an interval matrix (R, n) and W (n, m)."""
    R, n = mlo.shape
    m = wlo.shape[1]
    for r in prange(R):
        for i in range(n):
            a = mlo[r, i]
            b = mhi[r, i]
            if a == 0.0 and b == 0.0:
                continue
            for j in range(m):
                plo, phi = _mul(a, b, wlo[i, j], whi[i, j])
                out_lo[r, j] = _add_lo(out_lo[r, j], plo)
                out_hi[r, j] = _add_hi(out_hi[r, j], phi)


@njit(parallel=True, cache=True)
def rowdot(mlo, mhi, blo, bhi, acc_lo, acc_hi):
    """acc[r] += sum_i M[r, i] * b[r, i], ascending i."""
    R, n = mlo.shape
    for r in prange(R):
        slo = acc_lo[r]
        shi = acc_hi[r]
        for i in range(n):
            plo, phi = _mul(mlo[r, i], mhi[r, i], blo[r, i], bhi[r, i])
            slo = _add_lo(slo, plo)
            shi = _add_hi(shi, phi)
        acc_lo[r] = slo
        acc_hi[r] = shi


@njit(parallel=True, cache=True)
def gbc(mlo, mhi, flo, fhi, sw, sh, out_lo, out_hi):
    """One convolutional backsubstitution step per row (transpose convolution).

    M has shape (R, Ww, Wh, C_out), the filter (fw, fh, C_in, C_out) and the
    output (R, (Ww-1)*sw+fw, (Wh-1)*sh+fh, C_in).  Loop nest and accumulation
    order follow the GBC listing: rows, (w, h), (f, g), c, d.
    """
    R, Ww, Wh, Cout = mlo.shape
    fw, fh, Cin, _ = flo.shape
    for r in prange(R):
        for w in range(Ww):
            for h in range(Wh):
                nz = False
                for d in range(Cout):
                    if mlo[r, w, h, d] != 0.0 or mhi[r, w, h, d] != 0.0:
                        nz = True
                        break
                if not nz:
                    continue
                for f in range(fw):
                    a = w * sw + f
                    for g in range(fh):
                        b = h * sh + g
                        for c in range(Cin):
                            slo = out_lo[r, a, b, c]
                            shi = out_hi[r, a, b, c]
                            for d in range(Cout):
                                plo, phi = _mul(mlo[r, w, h, d], mhi[r, w, h, d],
                                                flo[f, g, c, d], fhi[f, g, c, d])
                                slo = _add_lo(slo, plo)
                                shi = _add_hi(shi, phi)
                            out_lo[r, a, b, c] = slo
                            out_hi[r, a, b, c] = shi


@njit(parallel=True, cache=True)
def relu_subst(clo, chi, alo, ahi, blo, bhi, glo, ghi, dlo, dhi, upper,
               out_lo, out_hi, k_lo, k_hi):
    """Sign-directed substitution of ReLU relaxations, rows x cells.

    A coefficient interval is split into its non-negative and non-positive
    parts; the positive part takes the bound of the pass polarity and the
    negative part the opposite one.
    """
    R, n = clo.shape
    for r in prange(R):
        slo = k_lo[r]
        shi = k_hi[r]
        for j in range(n):
            pl = max(clo[r, j], 0.0)
            ph = max(chi[r, j], 0.0)
            nl = min(clo[r, j], 0.0)
            nh = min(chi[r, j], 0.0)
            if upper:
                s1l, s1h, o1l, o1h = glo[r, j], ghi[r, j], dlo[r, j], dhi[r, j]
                s2l, s2h, o2l, o2h = alo[r, j], ahi[r, j], blo[r, j], bhi[r, j]
            else:
                s1l, s1h, o1l, o1h = alo[r, j], ahi[r, j], blo[r, j], bhi[r, j]
                s2l, s2h, o2l, o2h = glo[r, j], ghi[r, j], dlo[r, j], dhi[r, j]
            xl, xh = _mul(pl, ph, s1l, s1h)
            yl, yh = _mul(nl, nh, s2l, s2h)
            out_lo[r, j] = _add_lo(xl, yl)
            out_hi[r, j] = _add_hi(xh, yh)
            xl, xh = _mul(pl, ph, o1l, o1h)
            slo = _add_lo(slo, xl)
            shi = _add_hi(shi, xh)
            yl, yh = _mul(nl, nh, o2l, o2h)
            slo = _add_lo(slo, yl)
            shi = _add_hi(shi, yh)
        k_lo[r] = slo
        k_hi[r] = shi


@njit(parallel=True, cache=True)
def concretize(clo, chi, xl, xu, k_lo, k_hi, upper, out):
    """Candidate bound per row: constant plus the worst corner of every term."""
    R, n = clo.shape
    for r in prange(R):
        if upper:
            s = k_hi[r]
            for j in range(n):
                _, phi = _mul(clo[r, j], chi[r, j], xl[r, j], xu[r, j])
                s = _add_hi(s, phi)
        else:
            s = k_lo[r]
            for j in range(n):
                plo, _ = _mul(clo[r, j], chi[r, j], xl[r, j], xu[r, j])
                s = _add_lo(s, plo)
        out[r] = s


@njit(parallel=True, cache=True)
def csr_interval(indptr, indices, wlo, whi, blo, bhi, xl, xu, out_l, out_u):
    """Interval image of a sparse affine map: bias first, then terms in order."""
    n = indptr.shape[0] - 1
    for i in prange(n):
        slo = blo[i]
        shi = bhi[i]
        for t in range(indptr[i], indptr[i + 1]):
            j = indices[t]
            plo, phi = _mul(wlo[t], whi[t], xl[j], xu[j])
            slo = _add_lo(slo, plo)
            shi = _add_hi(shi, phi)
        out_l[i] = slo
        out_u[i] = shi
