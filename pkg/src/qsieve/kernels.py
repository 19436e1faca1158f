"""Kernel dispatch: compiled extension when importable, numpy otherwise.

Set ``QSIEVE_PURE_PYTHON=1`` before import to force the fallback.
"""

import os

import numpy as np

from . import _kernels_py

USING_EXTENSION = False
_impl = _kernels_py

if os.environ.get("QSIEVE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        USING_EXTENSION = True


def bspline_design(x, knots, degree, nbasis, nderiv=0):
    x = np.ascontiguousarray(x, dtype=np.float64)
    knots = np.ascontiguousarray(knots, dtype=np.float64)
    return _impl.bspline_design(x, knots, int(degree), int(nbasis), int(nderiv))


def rowwise_kron(A, B):
    A = np.ascontiguousarray(A, dtype=np.float64)
    B = np.ascontiguousarray(B, dtype=np.float64)
    return _impl.rowwise_kron(A, B)


def implementations():
    """Both implementations, keyed by name, for benchmarking and tests."""
    impls = {"python": _kernels_py}
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        impls["compiled"] = _compiled
    return impls
