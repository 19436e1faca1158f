"""Policies, transition kernels and initial-state laws on rectangles.

Every sampler is an inverse-CDF map from uniforms, so randomness stays in the
caller's :class:`~qsieve.numerics.SeededStream` and draws are reproducible.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import InputError
from .numerics import box_volume, tensor_gauss_rule

_SQRT_2PI = np.sqrt(2.0 * np.pi)


def _as_rows(X, d):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, d) if d > 1 else X[:, None]
    return X


class _TruncatedProduct:
    """Product of independent truncated normals with location ``mean`` and scale ``sd``."""

    def __init__(self, box, sd):
        self.box = tuple((float(lo), float(hi)) for lo, hi in box)
        self.sd = np.broadcast_to(np.asarray(sd, dtype=float), (len(self.box),)).copy()
        if np.any(self.sd <= 0):
            raise InputError("standard deviations must be positive")
        self.lo = np.array([b[0] for b in self.box])
        self.hi = np.array([b[1] for b in self.box])

    def _mass(self, mean):
        return ndtr((self.hi - mean) / self.sd) - ndtr((self.lo - mean) / self.sd)

    def density(self, mean, X):
        """Paired densities: ``mean`` and ``X`` both (n, d)."""
        z = (X - mean) / self.sd
        pdf = np.exp(-0.5 * z * z) / (_SQRT_2PI * self.sd)
        inside = np.all((X >= self.lo) & (X <= self.hi), axis=1)
        return np.prod(pdf / self._mass(mean), axis=1) * inside

    def density_matrix(self, mean, nodes):
        """Densities of every node (m, d) under every location (n, d) -> (n, m)."""
        out = np.ones((mean.shape[0], nodes.shape[0]))
        mass = self._mass(mean)
        for k in range(len(self.box)):
            z = (nodes[None, :, k] - mean[:, k, None]) / self.sd[k]
            out *= np.exp(-0.5 * z * z) / (_SQRT_2PI * self.sd[k] * mass[:, k, None])
        inside = np.all((nodes >= self.lo) & (nodes <= self.hi), axis=1)
        return out * inside

    def sample(self, mean, U):
        a = ndtr((self.lo - mean) / self.sd)
        b = ndtr((self.hi - mean) / self.sd)
        X = mean + self.sd * ndtri(a + U * (b - a))
        # rounding guard only; the law is supported on the box
        return np.clip(X, self.lo, self.hi)


class PolicyDensity:
    """Conditional action law ``pi(a | s)`` on ``action_box``.

    Subclasses provide :meth:`density_matrix` and :meth:`sample`; point-mass
    policies set ``is_point_mass`` and implement :meth:`location`.
    """

    is_point_mass = False

    def __init__(self, action_box):
        self.action_box = tuple((float(lo), float(hi)) for lo, hi in action_box)

    @property
    def action_dim(self):
        return len(self.action_box)

    def density(self, S, A):
        """Paired densities ``pi(A[i] | S[i])``."""
        S = np.asarray(S, dtype=float)
        A = _as_rows(A, self.action_dim)
        return np.array([self.density_matrix(S[i : i + 1], A[i : i + 1])[0, 0] for i in range(A.shape[0])])

    def density_matrix(self, S, A_nodes):
        raise NotImplementedError

    def sample(self, S, U):
        raise NotImplementedError

    def location(self, S):
        raise InputError("not a point-mass policy")

    def to_dict(self):
        raise NotImplementedError


class TruncatedGaussianPolicy(PolicyDensity):
    """Gaussian actions with state-dependent mean, truncated to the action box.

    ``mean_fn`` maps states (n, d_s) to means (n, d_a).
    """

    def __init__(self, mean_fn, sd, action_box, description=None):
        super().__init__(action_box)
        self.mean_fn = mean_fn
        self._law = _TruncatedProduct(self.action_box, sd)
        self.description = description

    def _mean(self, S):
        S = np.asarray(S, dtype=float)
        if S.ndim == 1:
            S = S[:, None]
        return np.asarray(self.mean_fn(S), dtype=float).reshape(S.shape[0], self.action_dim)

    def density(self, S, A):
        return self._law.density(self._mean(S), _as_rows(A, self.action_dim))

    def density_matrix(self, S, A_nodes):
        return self._law.density_matrix(self._mean(S), _as_rows(A_nodes, self.action_dim))

    def sample(self, S, U):
        return self._law.sample(self._mean(S), _as_rows(U, self.action_dim))

    def to_dict(self):
        return {"kind": "truncated_gaussian", "sd": self._law.sd.tolist(), "description": self.description}


class UniformPolicy(PolicyDensity):
    def __init__(self, action_box):
        super().__init__(action_box)
        self._vol = box_volume(self.action_box)
        self._lo = np.array([b[0] for b in self.action_box])
        self._hi = np.array([b[1] for b in self.action_box])

    def density(self, S, A):
        A = _as_rows(A, self.action_dim)
        return np.all((A >= self._lo) & (A <= self._hi), axis=1) / self._vol

    def density_matrix(self, S, A_nodes):
        n = np.asarray(S).shape[0]
        return np.tile(self.density(None, A_nodes), (n, 1))

    def sample(self, S, U):
        return self._lo + _as_rows(U, self.action_dim) * (self._hi - self._lo)

    def to_dict(self):
        return {"kind": "uniform"}


class PointMassPolicy(PolicyDensity):
    """Deterministic policy ``a = location_fn(s)``; integrals bypass quadrature."""

    is_point_mass = True

    def __init__(self, location_fn, action_box):
        super().__init__(action_box)
        self.location_fn = location_fn

    def location(self, S):
        S = np.asarray(S, dtype=float)
        if S.ndim == 1:
            S = S[:, None]
        return np.asarray(self.location_fn(S), dtype=float).reshape(S.shape[0], self.action_dim)

    def density(self, S, A):
        raise InputError("a point-mass policy has no density")

    def density_matrix(self, S, A_nodes):
        raise InputError("a point-mass policy has no density")

    def sample(self, S, U):
        return self.location(S)

    def to_dict(self):
        return {"kind": "point_mass"}


def constant_point_policy(a0, action_box):
    a0 = np.atleast_1d(np.asarray(a0, dtype=float))
    return PointMassPolicy(lambda S: np.tile(a0, (S.shape[0], 1)), action_box)


def check_normalization(policy, state_box, rule=None, n_states=7, tol=1e-6):
    """Verify ``int pi(a|s) da = 1`` at Gauss nodes of the state box."""
    if policy.is_point_mass:
        return 0.0
    if rule is None:
        rule = tensor_gauss_rule(policy.action_box, 64)
    states = tensor_gauss_rule(state_box, n_states).nodes
    mass = policy.density_matrix(states, rule.nodes) @ rule.weights
    err = float(np.max(np.abs(mass - 1.0)))
    if err > tol:
        raise InputError(f"policy density integrates to {mass.min():.8f}..{mass.max():.8f}, not 1")
    return err


class TruncatedGaussianTransition:
    """Next state ``s' ~ N(mean_fn(s, a), sd^2)`` truncated to the state box.

    The density is smooth and bounded away from zero on the box, which keeps
    the behaviour chain uniformly ergodic and the coverage constants finite.
    """

    def __init__(self, mean_fn, sd, state_box, description=None):
        self.state_box = tuple((float(lo), float(hi)) for lo, hi in state_box)
        self.mean_fn = mean_fn
        self._law = _TruncatedProduct(self.state_box, sd)
        self.description = description

    @property
    def state_dim(self):
        return len(self.state_box)

    def mean(self, S, A):
        return np.asarray(self.mean_fn(S, A), dtype=float).reshape(np.shape(S)[0], self.state_dim)

    def density(self, S, A, Sp):
        return self._law.density(self.mean(S, A), _as_rows(Sp, self.state_dim))

    def density_matrix(self, S, A, Sp_nodes):
        return self._law.density_matrix(self.mean(S, A), _as_rows(Sp_nodes, self.state_dim))

    def sample(self, S, A, U):
        return self._law.sample(self.mean(S, A), _as_rows(U, self.state_dim))

    @property
    def sd(self):
        return self._law.sd

    def to_dict(self):
        return {"kind": "truncated_gaussian", "sd": self._law.sd.tolist(), "description": self.description}


class InitialDistribution:
    """State law ``F`` used by the plug-in value: a point mass or a density."""

    def __init__(self, state_box, point=None, density_fn=None):
        self.state_box = tuple((float(lo), float(hi)) for lo, hi in state_box)
        if (point is None) == (density_fn is None):
            raise InputError("give exactly one of point or density_fn")
        if point is not None:
            point = np.atleast_1d(np.asarray(point, dtype=float))
            lo = np.array([b[0] for b in self.state_box])
            hi = np.array([b[1] for b in self.state_box])
            if point.shape != lo.shape or np.any(point < lo) or np.any(point > hi):
                raise InputError(f"initial point {point.tolist()} is not inside the state box")
        self.point = point
        self.density_fn = density_fn

    @property
    def is_point_mass(self):
        return self.point is not None

    @classmethod
    def uniform(cls, state_box):
        vol = box_volume(state_box)
        return cls(state_box, density_fn=lambda S: np.full(np.shape(S)[0], 1.0 / vol))

    def nodes_and_weights(self, rule):
        """Integration nodes and weights (weights sum to one for densities)."""
        if self.is_point_mass:
            return self.point[None, :], np.ones(1)
        w = rule.weights * self.density_fn(rule.nodes)
        if np.any(w < 0):
            raise InputError("initial density is negative at a quadrature node")
        return rule.nodes, w
