"""Tensor-product sieve bases on a rectangle.

Three univariate families are available and combined by tensor product:

* ``bspline`` -- clamped B-splines of a given degree on uniform knots,
* ``cosine`` -- ``1, sqrt(2) cos(k pi u)``, orthonormal under the uniform law,
* ``legendre`` -- ``sqrt(2k+1) P_k(2u - 1)``, orthonormal under the uniform law,

where ``u`` is the coordinate rescaled to ``[0, 1]``.

Column ordering contract: column ``j`` corresponds to the per-dimension
multi-index ``np.unravel_index(j, per_dim_count)`` (C order, last dimension
fastest). Coordinates are ordered state dimensions first, then actions.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import CapabilityError, InputError

FAMILIES = ("bspline", "cosine", "legendre")


class RankDeficiencyWarning(UserWarning):
    """A Gram or projection matrix is expected to be singular."""


@dataclass(frozen=True)
class BasisSpec:
    family: str
    per_dim_count: tuple
    domain: tuple
    degree: int = 3

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InputError(f"unknown basis family {self.family!r}; expected one of {FAMILIES}")
        counts = tuple(int(m) for m in self.per_dim_count)
        domain = tuple((float(lo), float(hi)) for lo, hi in self.domain)
        object.__setattr__(self, "per_dim_count", counts)
        object.__setattr__(self, "domain", domain)
        object.__setattr__(self, "degree", int(self.degree))
        if len(counts) != len(domain) or not counts:
            raise InputError("per_dim_count and domain must have the same positive length")
        if len(counts) > 6:
            raise CapabilityError("at most 6 dimensions are supported")
        if min(counts) < 1:
            raise InputError("per-dimension counts must be >= 1")
        for lo, hi in domain:
            if not hi > lo:
                raise InputError(f"degenerate domain side [{lo}, {hi}]")
        if self.family == "bspline":
            if self.degree < 1:
                raise InputError("bspline degree must be >= 1")
            if min(counts) < self.degree + 1:
                raise InputError(
                    f"bspline of degree {self.degree} needs at least {self.degree + 1} functions per dimension"
                )

    @property
    def dim(self):
        return len(self.per_dim_count)

    @property
    def size(self):
        """Total number of basis functions (J or K)."""
        return int(np.prod(self.per_dim_count))

    def with_counts(self, per_dim_count):
        return BasisSpec(self.family, tuple(per_dim_count), self.domain, self.degree)

    def to_dict(self):
        return {
            "family": self.family,
            "degree": self.degree,
            "per_dim_count": list(self.per_dim_count),
            "domain": [list(side) for side in self.domain],
        }

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(d["family"], tuple(d["per_dim_count"]), tuple(tuple(s) for s in d["domain"]), d.get("degree", 3))
        except KeyError as exc:
            raise InputError(f"basis description lacks field {exc}") from None


def multi_index(spec, j):
    """Per-dimension indices of flat column ``j``."""
    return tuple(int(i) for i in np.unravel_index(j, spec.per_dim_count))


def flat_index(spec, idx):
    """Inverse of :func:`multi_index`."""
    return int(np.ravel_multi_index(tuple(idx), spec.per_dim_count))


def bspline_knots(lo, hi, count, degree):
    """Clamped uniform knot vector with ``count`` basis functions."""
    inner = np.linspace(lo, hi, count - degree + 1)
    return np.concatenate([np.full(degree, lo), inner, np.full(degree, hi)])


def _check_points(spec, points):
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[:, None] if spec.dim == 1 else X[None, :]
    if X.ndim != 2 or X.shape[1] != spec.dim:
        raise InputError(f"points must have shape (n, {spec.dim}), got {np.shape(points)}")
    lo = np.array([s[0] for s in spec.domain])
    hi = np.array([s[1] for s in spec.domain])
    bad = ~np.all((X >= lo) & (X <= hi), axis=1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise InputError(f"point {X[i].tolist()} (row {i}) lies outside the basis domain {list(spec.domain)}")
    return X


def _factor(spec, axis, x, order):
    """Univariate design matrix (n, m) of the ``order``-th derivative."""
    lo, hi = spec.domain[axis]
    m = spec.per_dim_count[axis]
    length = hi - lo
    if spec.family == "bspline":
        t = bspline_knots(lo, hi, m, spec.degree)
        return kernels.bspline_design(x, t, spec.degree, m, order)
    u = (x - lo) / length
    if spec.family == "cosine":
        freq = np.pi * np.arange(m)
        scale = np.full(m, np.sqrt(2.0))
        scale[0] = 1.0
        vals = np.cos(np.outer(u, freq) + order * np.pi / 2.0)
        return vals * (scale * (freq / length) ** order if order else scale)
    # legendre
    V = np.polynomial.legendre.legvander(2.0 * u - 1.0, m - 1)
    norm = np.sqrt(2.0 * np.arange(m) + 1.0)
    if order == 0:
        return V * norm
    C = np.zeros((m, m))
    for k in range(m):
        e = np.zeros(m)
        e[k] = 1.0
        dk = np.polynomial.legendre.legder(e, order, scl=2.0 / length)
        C[: dk.size, k] = dk
    return (V @ C) * norm


def _tensor(factors):
    out = factors[0]
    for F in factors[1:]:
        out = kernels.rowwise_kron(out, F)
    return out


def eval_basis(spec, points):
    """Design matrix of shape (n, J) at ``points``."""
    X = _check_points(spec, points)
    return _tensor([_factor(spec, i, X[:, i], 0) for i in range(spec.dim)])


def _check_alpha(spec, alpha):
    alpha = tuple(int(a) for a in alpha)
    if len(alpha) != spec.dim or min(alpha) < 0:
        raise InputError(f"derivative multi-index must be {spec.dim} non-negative integers, got {alpha}")
    if spec.family == "bspline" and sum(alpha) > spec.degree - 1:
        raise CapabilityError(
            f"derivative order {sum(alpha)} exceeds the smoothness of degree-{spec.degree} B-splines"
        )
    return alpha


def eval_basis_deriv(spec, points, alpha):
    """Matrix of partial derivatives ``d^alpha psi_j`` at ``points``."""
    alpha = _check_alpha(spec, alpha)
    X = _check_points(spec, points)
    return _tensor([_factor(spec, i, X[:, i], alpha[i]) for i in range(spec.dim)])


def policy_basis(spec, policy, s_points, rule=None):
    """Rows ``int pi(a|s) psi(s, a) da`` for each state in ``s_points``.

    ``rule`` integrates over the action box (the trailing basis dimensions).
    Point-mass policies are evaluated at their location and ignore ``rule``.
    """
    S = np.asarray(s_points, dtype=float)
    if S.ndim == 1:
        S = S[:, None]
    ds = S.shape[1]
    da = spec.dim - ds
    if da < 1:
        raise InputError("state points leave no action dimensions in the basis")
    if policy.is_point_mass:
        A = np.asarray(policy.location(S), dtype=float).reshape(S.shape[0], da)
        return eval_basis(spec, np.hstack([S, A]))
    if rule is None:
        raise InputError("a quadrature rule over the action box is required")
    if rule.dim != da:
        raise InputError(f"rule has dimension {rule.dim}, action part of basis has {da}")
    for (rlo, rhi), (blo, bhi) in zip(rule.box, spec.domain[ds:]):
        if rlo < blo or rhi > bhi:
            raise InputError("quadrature rule extends beyond the action domain of the basis")
    state_part = _check_points(_sub_spec(spec, range(ds)), S)
    Fs = _tensor([_factor(spec, i, state_part[:, i], 0) for i in range(ds)])
    Fa = _tensor([_factor(spec, ds + i, rule.nodes[:, i], 0) for i in range(da)])
    dens = policy.density_matrix(S, rule.nodes)
    if np.any(dens < 0):
        i, r = np.argwhere(dens < 0)[0]
        raise InputError(f"policy density is negative at state {S[i].tolist()}, action {rule.nodes[r].tolist()}")
    action_means = (dens * rule.weights) @ Fa
    return kernels.rowwise_kron(Fs, action_means)


def _sub_spec(spec, dims):
    dims = list(dims)
    return BasisSpec(
        spec.family, tuple(spec.per_dim_count[i] for i in dims), tuple(spec.domain[i] for i in dims), spec.degree
    )


def gram_matrix(spec, weight_points):
    """Empirical Gram matrix ``(1/n) sum psi(x_i) psi(x_i)^T``.

    Emits :class:`RankDeficiencyWarning` when fewer than J points are given.
    """
    Psi = eval_basis(spec, weight_points)
    n = Psi.shape[0]
    if n < spec.size:
        warnings.warn(f"{n} points for {spec.size} basis functions; Gram is rank deficient", RankDeficiencyWarning)
    G = Psi.T @ Psi / n
    return 0.5 * (G + G.T)
