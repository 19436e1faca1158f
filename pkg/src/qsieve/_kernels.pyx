# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for basis evaluation.

Mirrors :mod:`qsieve._kernels_py` function for function.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline Py_ssize_t _find_span(double x, const double[::1] knots, int degree, Py_ssize_t nbasis) noexcept nogil:
    cdef Py_ssize_t lo, hi, mid
    if x >= knots[nbasis]:
        return nbasis - 1
    if x <= knots[degree]:
        return degree
    lo = degree
    hi = nbasis
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if x < knots[mid]:
            hi = mid
        else:
            lo = mid
    return lo


def bspline_design(const double[::1] x, const double[::1] knots, int degree, Py_ssize_t nbasis, int nderiv):
    """Dense matrix of the ``nderiv``-th derivative of every B-spline at ``x``."""
    cdef Py_ssize_t n = x.shape[0]
    out = np.zeros((n, nbasis), dtype=np.float64)
    cdef double[:, ::1] res = out
    if nderiv > degree:
        return out
    cdef int p = degree
    cdef double[:, ::1] ndu = np.empty((p + 1, p + 1), dtype=np.float64)
    cdef double[:, ::1] a = np.empty((2, p + 1), dtype=np.float64)
    cdef double[::1] left = np.empty(p + 1, dtype=np.float64)
    cdef double[::1] right = np.empty(p + 1, dtype=np.float64)
    cdef double[::1] ders = np.empty(p + 1, dtype=np.float64)
    cdef Py_ssize_t i, row, span
    cdef int j, r, k, s1, s2, rk, pk, j1, j2, tmp
    cdef double u, saved, temp, d, fac
    with nogil:
        for row in range(n):
            u = x[row]
            span = _find_span(u, knots, p, nbasis)
            ndu[0, 0] = 1.0
            for j in range(1, p + 1):
                left[j] = u - knots[span + 1 - j]
                right[j] = knots[span + j] - u
                saved = 0.0
                for r in range(j):
                    ndu[j, r] = right[r + 1] + left[j - r]
                    temp = ndu[r, j - 1] / ndu[j, r]
                    ndu[r, j] = saved + right[r + 1] * temp
                    saved = left[j - r] * temp
                ndu[j, j] = saved
            if nderiv == 0:
                for j in range(p + 1):
                    res[row, span - p + j] = ndu[j, p]
                continue
            k = nderiv
            for r in range(p + 1):
                s1 = 0
                s2 = 1
                a[0, 0] = 1.0
                for k in range(1, nderiv + 1):
                    d = 0.0
                    rk = r - k
                    pk = p - k
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
                    tmp = s1
                    s1 = s2
                    s2 = tmp
            fac = 1.0
            for k in range(nderiv):
                fac = fac * (p - k)
            for j in range(p + 1):
                res[row, span - p + j] = ders[j] * fac
    return out


def rowwise_kron(const double[:, ::1] A, const double[:, ::1] B):
    """Row ``i`` of the result is ``kron(A[i], B[i])``."""
    cdef Py_ssize_t n = A.shape[0], p = A.shape[1], q = B.shape[1]
    out = np.empty((n, p * q), dtype=np.float64)
    cdef double[:, ::1] res = out
    cdef Py_ssize_t i, j, k
    cdef double aij
    with nogil:
        for i in range(n):
            for j in range(p):
                aij = A[i, j]
                for k in range(q):
                    res[i, j * q + k] = aij * B[i, k]
    return out
