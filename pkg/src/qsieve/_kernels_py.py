"""Pure numpy implementations of the compiled kernels.

Vectorised across evaluation points; used when the extension is not built or
when ``QSIEVE_PURE_PYTHON=1`` is set.
"""

import numpy as np


def _find_span(x, knots, degree, nbasis):
    span = np.searchsorted(knots, x, side="right") - 1
    return np.clip(span, degree, nbasis - 1)


def bspline_design(x, knots, degree, nbasis, nderiv):
    x = np.ascontiguousarray(x, dtype=float)
    knots = np.ascontiguousarray(knots, dtype=float)
    n = x.shape[0]
    p = int(degree)
    out = np.zeros((n, nbasis))
    if nderiv > p or n == 0:
        return out
    span = _find_span(x, knots, p, nbasis)
    ndu = np.empty((p + 1, p + 1, n))
    left = np.empty((p + 1, n))
    right = np.empty((p + 1, n))
    ndu[0, 0] = 1.0
    for j in range(1, p + 1):
        left[j] = x - knots[span + 1 - j]
        right[j] = knots[span + j] - x
        saved = np.zeros(n)
        for r in range(j):
            ndu[j, r] = right[r + 1] + left[j - r]
            temp = ndu[r, j - 1] / ndu[j, r]
            ndu[r, j] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        ndu[j, j] = saved
    rows = np.arange(n)
    if nderiv == 0:
        for j in range(p + 1):
            out[rows, span - p + j] = ndu[j, p]
        return out
    ders = np.empty((p + 1, n))
    for r in range(p + 1):
        a = np.zeros((2, p + 1, n))
        a[0, 0] = 1.0
        s1, s2 = 0, 1
        for k in range(1, nderiv + 1):
            d = np.zeros(n)
            rk, pk = r - k, p - k
            if r >= k:
                a[s2, 0] = a[s1, 0] / ndu[pk + 1, rk]
                d = a[s2, 0] * ndu[rk, pk]
            j1 = 1 if rk >= -1 else -rk
            j2 = k - 1 if r - 1 <= pk else p - r
            for j in range(j1, j2 + 1):
                a[s2, j] = (a[s1, j] - a[s1, j - 1]) / ndu[pk + 1, rk + j]
                d = d + a[s2, j] * ndu[rk + j, pk]
            if r <= pk:
                a[s2, k] = -a[s1, k - 1] / ndu[pk + 1, r]
                d = d + a[s2, k] * ndu[r, pk]
            ders[r] = d
            s1, s2 = s2, s1
    fac = float(np.prod([p - k for k in range(nderiv)]))
    for j in range(p + 1):
        out[rows, span - p + j] = ders[j] * fac
    return out


def rowwise_kron(A, B):
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    return (A[:, :, None] * B[:, None, :]).reshape(A.shape[0], -1)
