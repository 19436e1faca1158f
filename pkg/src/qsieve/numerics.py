"""Linear-algebra, quadrature and random-stream primitives.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. All functions
here are pure: they never mutate their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InputError

DEFAULT_RTOL = 1e-10


def _as_finite_matrix(A, name="A"):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2:
        raise InputError(f"{name} must be 2-d, got shape {A.shape}")
    if A.size == 0:
        raise InputError(f"{name} must have positive dimensions")
    if not np.all(np.isfinite(A)):
        raise InputError(f"{name} contains non-finite entries")
    return A


def pinv_truncated(A, rtol=DEFAULT_RTOL):
    """Moore-Penrose inverse with singular values below ``rtol * s_max`` dropped.

    Parameters
    ----------
    A : array_like, shape (m, n)
    rtol : float
        Relative truncation threshold in (0, 1).

    Returns
    -------
    ndarray, shape (n, m)
    """
    if not 0.0 < rtol < 1.0:
        raise InputError(f"rtol must lie in (0, 1), got {rtol}")
    A = _as_finite_matrix(A)
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((A.shape[1], A.shape[0]))
    keep = s > rtol * s[0]
    inv_s = np.zeros_like(s)
    inv_s[keep] = 1.0 / s[keep]
    return (Vt.T * inv_s) @ U.T


def numerical_rank(A, rtol=DEFAULT_RTOL):
    """Number of singular values above ``rtol * s_max``."""
    s = np.linalg.svd(_as_finite_matrix(A), compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def _check_symmetric(A, tol=1e-10):
    A = _as_finite_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise InputError(f"matrix must be square, got shape {A.shape}")
    scale = max(np.max(np.abs(A)), np.finfo(float).tiny)
    if np.max(np.abs(A - A.T)) > tol * scale:
        raise InputError("matrix is not symmetric within relative tolerance 1e-10")
    return 0.5 * (A + A.T)


def sym_eig_extremes(A):
    """Return ``(lambda_min, lambda_max)`` of a symmetric matrix."""
    w = np.linalg.eigvalsh(_check_symmetric(A))
    return float(w[0]), float(w[-1])


def min_singular(A):
    """Smallest of the ``min(m, n)`` singular values of ``A``."""
    s = np.linalg.svd(_as_finite_matrix(A), compute_uv=False)
    return float(s[-1])


def sym_inv_sqrt(A, rtol=DEFAULT_RTOL):
    """Symmetric pseudo inverse square root of a PSD matrix.

    Eigenvalues below ``rtol * lambda_max`` are treated as zero. Returns the
    matrix together with the retained rank.
    """
    A = _check_symmetric(A)
    w, V = np.linalg.eigh(A)
    top = w[-1]
    if top <= 0.0:
        return np.zeros_like(A), 0
    keep = w > rtol * top
    d = np.zeros_like(w)
    d[keep] = 1.0 / np.sqrt(w[keep])
    return (V * d) @ V.T, int(keep.sum())


@dataclass(frozen=True)
class QuadratureRule:
    """Tensor-product quadrature rule on a rectangle.

    ``nodes`` has shape (n, k); ``weights`` shape (n,). The one-dimensional
    factors are kept in ``axes`` so separable integrands can skip the full
    tensor grid. Node ordering is lexicographic with the last axis fastest.
    """

    box: tuple
    axes: tuple  # per-dimension (nodes, weights)
    nodes: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)

    @property
    def dim(self):
        return len(self.box)

    @property
    def size(self):
        return self.weights.shape[0]

    def integrate(self, values):
        """Integrate sampled values (leading axis over nodes)."""
        return np.tensordot(self.weights, np.asarray(values, dtype=float), axes=(0, 0))

    def restrict(self, dims):
        """Sub-rule over the listed dimensions."""
        dims = list(dims)
        return _build_rule([self.box[i] for i in dims], [self.axes[i] for i in dims])


def _check_box(box):
    box = tuple((float(lo), float(hi)) for lo, hi in box)
    if not box:
        raise InputError("box must have at least one dimension")
    for lo, hi in box:
        if not (np.isfinite(lo) and np.isfinite(hi)) or hi <= lo:
            raise InputError(f"degenerate box side [{lo}, {hi}]")
    return box


def _build_rule(box, axes):
    grids = np.meshgrid(*[x for x, _ in axes], indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    wgrids = np.meshgrid(*[w for _, w in axes], indexing="ij")
    weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
    return QuadratureRule(tuple(box), tuple(axes), nodes, weights)


def gauss_legendre_1d(lo, hi, n):
    x, w = np.polynomial.legendre.leggauss(n)
    half = 0.5 * (hi - lo)
    return lo + half * (x + 1.0), half * w


def tensor_gauss_rule(box, nodes_per_dim):
    """Tensor Gauss-Legendre rule on ``box``.

    Exact for polynomials of degree ``2 * nodes_per_dim - 1`` in each
    coordinate. ``nodes_per_dim`` may be an int or one count per dimension.
    """
    box = _check_box(box)
    if np.isscalar(nodes_per_dim):
        counts = [int(nodes_per_dim)] * len(box)
    else:
        counts = [int(c) for c in nodes_per_dim]
        if len(counts) != len(box):
            raise InputError("nodes_per_dim length must match box dimension")
    if min(counts) < 1:
        raise InputError("nodes_per_dim must be >= 1")
    axes = tuple(gauss_legendre_1d(lo, hi, n) for (lo, hi), n in zip(box, counts))
    return _build_rule(box, axes)


def box_volume(box):
    return float(np.prod([hi - lo for lo, hi in box]))


def uniform_grid(box, per_dim, inset=None):
    """Tensor grid of equispaced points (lexicographic, last axis fastest).

    ``inset`` optionally shrinks each side by the given absolute amounts.
    """
    box = _check_box(box)
    if np.isscalar(per_dim):
        per_dim = [int(per_dim)] * len(box)
    inset = [0.0] * len(box) if inset is None else list(inset)
    axes = [np.linspace(lo + e, hi - e, n) for (lo, hi), n, e in zip(box, per_dim, inset)]
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1), axes


class SeededStream:
    """Reproducible random stream addressed by ``(seed, stream_id)``.

    Streams with the same address produce identical draws; distinct ids map
    to statistically independent ``SeedSequence`` children.
    """

    def __init__(self, seed: int, stream_id: int | Sequence[int] = 0):
        self.seed = int(seed)
        ids = (stream_id,) if np.isscalar(stream_id) else tuple(stream_id)
        self.stream_id = tuple(int(i) for i in ids)
        ss = np.random.SeedSequence(entropy=self.seed & 0xFFFFFFFFFFFFFFFF, spawn_key=self.stream_id)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def child(self, *ids):
        return SeededStream(self.seed, self.stream_id + tuple(ids))

    def uniform(self, size=None):
        return self.generator.random(size)

    def normal(self, size=None):
        return self.generator.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def __repr__(self):
        return f"SeededStream(seed={self.seed}, stream_id={self.stream_id})"
