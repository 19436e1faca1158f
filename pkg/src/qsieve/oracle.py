"""Ground-truth machinery: stationary law, conditional expectations, Q oracles."""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import make_interp_spline

from .errors import ConvergenceError, InputError
from .mdp import atomic_write_bytes, policy_average
from .numerics import tensor_gauss_rule, uniform_grid

DEFAULT_STATE_NODES = 64
DEFAULT_ACTION_NODES = 48


def default_rules(mdp, state_nodes=DEFAULT_STATE_NODES, action_nodes=DEFAULT_ACTION_NODES):
    return tensor_gauss_rule(mdp.state_box, state_nodes), tensor_gauss_rule(mdp.action_box, action_nodes)


def _pairs(S, A):
    S = np.asarray(S, dtype=float)
    A = np.asarray(A, dtype=float)
    if S.ndim == 1:
        S = S[:, None]
    if A.ndim == 1:
        A = A[:, None]
    if S.shape[0] != A.shape[0]:
        raise InputError("state and action arrays must have the same number of rows")
    return S, A


def transition_weights(mdp, S, A, state_rule):
    """Matrix ``q(s'_k | s_i, a_i) w_k`` of shape (n, n_nodes)."""
    return mdp.transition.density_matrix(S, A, state_rule.nodes) * state_rule.weights


def apply_T(mdp, f, S, A, state_rule=None, chunk=4096):
    """Conditional expectation ``E[f(s, a, S') | s, a]`` by quadrature over ``S'``.

    ``f(S, A, Sp)`` takes paired rows.
    """
    S, A = _pairs(S, A)
    if state_rule is None:
        state_rule = default_rules(mdp)[0]
    m = state_rule.size
    out = np.empty(S.shape[0])
    for start in range(0, S.shape[0], chunk):
        sl = slice(start, start + chunk)
        Sc, Ac = S[sl], A[sl]
        n = Sc.shape[0]
        W = transition_weights(mdp, Sc, Ac, state_rule)
        vals = np.asarray(
            f(np.repeat(Sc, m, axis=0), np.repeat(Ac, m, axis=0), np.tile(state_rule.nodes, (n, 1))), dtype=float
        ).reshape(n, m)
        out[sl] = np.sum(W * vals, axis=1)
    return out


def mean_reward(mdp, S, A, state_rule=None):
    """``r(s, a) = E[R | s, a]``."""
    S, A = _pairs(S, A)
    if state_rule is None:
        state_rule = default_rules(mdp)[0]
    if mdp.reward_split is not None:
        f_sa, f_sp = mdp.reward_split
        W = transition_weights(mdp, S, A, state_rule)
        return np.asarray(f_sa(S, A), dtype=float) + W @ np.asarray(f_sp(state_rule.nodes), dtype=float)
    return apply_T(mdp, mdp.mean_reward_fn, S, A, state_rule)


def next_value(mdp, target, qfn, S, A, state_rule=None, action_rule=None):
    """``(P^pi Q)(s, a) = E[int pi(a'|S') Q(S', a') da' | s, a]``."""
    S, A = _pairs(S, A)
    if state_rule is None or action_rule is None:
        sr, ar = default_rules(mdp)
        state_rule = state_rule or sr
        action_rule = action_rule or ar
    V = policy_average(qfn, target, state_rule.nodes, action_rule)
    return transition_weights(mdp, S, A, state_rule) @ V


class StationaryLaw:
    """Stationary density of the behaviour chain by Nystrom discretisation.

    The state kernel ``k(s'|s) = int pi_b(a|s) q(s'|s, a) da`` is collocated
    on Gauss nodes; the stationary density is the Perron eigenvector of the
    weighted kernel matrix, extended off the nodes by the Nystrom formula.
    """

    def __init__(self, mdp, behavior, state_nodes=DEFAULT_STATE_NODES, action_rule=None):
        self.mdp = mdp
        self.behavior = behavior
        self.rule = tensor_gauss_rule(mdp.state_box, state_nodes)
        self.action_rule = action_rule if action_rule is not None else tensor_gauss_rule(mdp.action_box, DEFAULT_ACTION_NODES)
        X, w = self.rule.nodes, self.rule.weights
        K = self._kernel(X, X)
        M = (w[:, None] * K).T
        vals, vecs = np.linalg.eig(M)
        k = int(np.argmin(np.abs(vals - 1.0)))
        if abs(vals[k] - 1.0) > 1e-6:
            raise InputError(f"discretised behaviour kernel has no unit eigenvalue (closest {vals[k]:.3g})")
        mu = np.real(vecs[:, k])
        mu = mu / np.dot(w, mu)
        self.node_density = mu

    def _kernel(self, S_from, S_to):
        """``k(s_to | s_from)`` as a (n_from, n_to) matrix."""
        mdp, pol = self.mdp, self.behavior
        if pol.is_point_mass:
            A = pol.location(S_from)
            return np.stack([mdp.transition.density(S_from, A, np.tile(s, (len(S_from), 1))) for s in S_to], axis=1)
        out = np.zeros((S_from.shape[0], S_to.shape[0]))
        pw = pol.density_matrix(S_from, self.action_rule.nodes) * self.action_rule.weights
        for r, a in enumerate(self.action_rule.nodes):
            A = np.tile(a, (S_from.shape[0], 1))
            out += pw[:, r : r + 1] * mdp.transition.density_matrix(S_from, A, S_to)
        return out

    def state_density(self, S):
        S = np.asarray(S, dtype=float)
        if S.ndim == 1:
            S = S[:, None]
        K = self._kernel(self.rule.nodes, S)
        return (self.rule.weights * self.node_density) @ K

    def joint_density(self, S, A):
        S, A = _pairs(S, A)
        if self.behavior.is_point_mass:
            raise InputError("a point-mass behaviour policy has no joint density")
        return self.state_density(S) * self.behavior.density(S, A)

    def joint_rule(self, nodes_per_dim=32):
        """Nodes on the state-action box with weights ``w * d(s, a)``."""
        rule = tensor_gauss_rule(self.mdp.box, nodes_per_dim)
        ds = self.mdp.state_dim
        d = self.joint_density(rule.nodes[:, :ds], rule.nodes[:, ds:])
        return rule.nodes, rule.weights * d

    def coverage(self, target, grid_per_dim=51):
        """Grid estimates of ``p_min``, ``p_1max``, ``p_2max`` and ``p_max``.

        Grid extrema are estimates: the true ``p_min`` may be lower and the
        maxima higher than reported.
        """
        mdp = self.mdp
        ds = mdp.state_dim
        grid, axes = uniform_grid(mdp.box, grid_per_dim)
        d = self.joint_density(grid[:, :ds], grid[:, ds:])
        sgrid, _ = uniform_grid(mdp.state_box, grid_per_dim)
        agrid, _ = uniform_grid(mdp.action_box, grid_per_dim)
        # sup over (s, a) of q(s' | s, a), for each s' on the grid
        q_sup = np.zeros(sgrid.shape[0])
        for start in range(0, grid.shape[0], 2048):
            blk = grid[start : start + 2048]
            q_sup = np.maximum(q_sup, mdp.transition.density_matrix(blk[:, :ds], blk[:, ds:], sgrid).max(axis=0))
        if target.is_point_mass:
            p2 = float("inf")
        else:
            pi_sup = target.density_matrix(sgrid, agrid).max(axis=1)
            p2 = float(np.max(q_sup * pi_sup))
        p1 = float(d.max())
        return {
            "p_min": float(d.min()),
            "p1_max": p1,
            "p2_max": p2,
            "p_max": max(p1, p2),
            "grid_per_dim": int(grid_per_dim),
        }


def _interp_matrix(axis, x, order):
    """Rows of weights mapping grid values on ``axis`` to values at ``x``."""
    spl = make_interp_spline(axis, np.eye(axis.size), k=order)
    return spl(np.asarray(x, dtype=float))


def _contract(values, mats):
    """Evaluate a tensor-grid function at scattered points.

    ``values`` has shape (g_1, ..., g_d) and ``mats[k]`` shape (n, g_k).
    """
    R = np.tensordot(mats[0], values, axes=(1, 0))  # (n, g_2, ..., g_d)
    for W in mats[1:]:
        R = np.einsum("ik,ik...->i...", W, R)
    return R


def _apply_axes(values, mats):
    """Apply ``mats[k]`` along axis ``k`` of a tensor (tensor-to-tensor)."""
    out = values
    for k, W in enumerate(mats):
        out = np.moveaxis(np.tensordot(W, out, axes=(1, k)), 0, k)
    return out


@dataclass
class OracleQ:
    """Grid representation of a Q-function with spline interpolation."""

    axes: list
    values: np.ndarray
    order: int = 3
    provenance: dict = field(default_factory=dict)

    @property
    def dim(self):
        return len(self.axes)

    def __call__(self, S, A):
        S, A = _pairs(S, A)
        X = np.hstack([S, A])
        lo = np.array([ax[0] for ax in self.axes])
        hi = np.array([ax[-1] for ax in self.axes])
        if np.any(X < lo - 1e-12) or np.any(X > hi + 1e-12):
            raise InputError("oracle evaluated outside its grid")
        mats = [_interp_matrix(ax, X[:, k], self.order) for k, ax in enumerate(self.axes)]
        return _contract(self.values, mats)

    @classmethod
    def from_function(cls, fn, box, grid_per_dim, state_dim, order=3):
        """Designed provenance: exact values of ``fn`` at the grid nodes."""
        grid, axes = uniform_grid(box, grid_per_dim)
        vals = np.asarray(fn(grid[:, :state_dim], grid[:, state_dim:]), dtype=float)
        return cls(axes, vals.reshape([ax.size for ax in axes]), order, {"kind": "designed"})

    def save(self, path):
        buf = io.BytesIO()
        arrays = {f"axis_{k}": ax for k, ax in enumerate(self.axes)}
        np.savez(buf, values=self.values, order=np.array(self.order), provenance=np.array(json.dumps(self.provenance)), **arrays)
        atomic_write_bytes(path, buf.getvalue())

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            axes = [z[f"axis_{k}"] for k in range(z["values"].ndim)]
            return cls(axes, z["values"], int(z["order"]), json.loads(str(z["provenance"])))


def fixed_point_oracle(
    mdp,
    target,
    grid_per_dim=201,
    state_rule=None,
    action_rule=None,
    tol=1e-8,
    max_iter=100000,
    order=3,
):
    """Solve the Bellman equation for ``target`` by value iteration on a grid.

    Iterates ``Q <- r + gamma P^pi Q`` with ``r`` and ``P^pi`` by quadrature
    and off-grid values of ``Q`` by tensor spline interpolation, stopping when
    the sup-change falls below ``tol * (1 - gamma)``.
    """
    gamma = mdp.gamma
    if not gamma < 1.0:
        raise InputError("fixed-point iteration needs gamma < 1")
    if int(grid_per_dim) < 5:
        raise InputError("grid_per_dim must be >= 5")
    sr, ar = default_rules(mdp)
    state_rule = state_rule or sr
    action_rule = action_rule or ar
    ds = mdp.state_dim
    grid, axes = uniform_grid(mdp.box, grid_per_dim)
    shape = [ax.size for ax in axes]
    S, A = grid[:, :ds], grid[:, ds:]

    rbar = np.empty(grid.shape[0])
    P = np.empty((grid.shape[0], state_rule.size))
    for start in range(0, grid.shape[0], 4096):
        sl = slice(start, start + 4096)
        rbar[sl] = mean_reward(mdp, S[sl], A[sl], state_rule)
        P[sl] = transition_weights(mdp, S[sl], A[sl], state_rule)

    nodes_s = state_rule.nodes
    if target.is_point_mass:
        locs = target.location(nodes_s)
        X = np.hstack([nodes_s, locs])
        mats = [_interp_matrix(ax, X[:, k], order) for k, ax in enumerate(axes)]

        def value_at_nodes(Qg):
            return _contract(Qg, mats)

    else:
        mats = [_interp_matrix(axes[k], state_rule.axes[k][0], order) for k in range(ds)]
        mats += [_interp_matrix(axes[ds + k], action_rule.axes[k][0], order) for k in range(mdp.action_dim)]
        pw = target.density_matrix(nodes_s, action_rule.nodes) * action_rule.weights

        def value_at_nodes(Qg):
            Qn = _apply_axes(Qg, mats).reshape(state_rule.size, action_rule.size)
            return np.sum(pw * Qn, axis=1)

    Q = rbar.copy()
    threshold = tol * (1.0 - gamma)
    change = np.inf
    it = 0
    while it < max_iter:
        Q_new = rbar + gamma * (P @ value_at_nodes(Q.reshape(shape)))
        change = float(np.max(np.abs(Q_new - Q)))
        Q = Q_new
        it += 1
        if change <= threshold:
            break
    else:
        raise ConvergenceError(f"value iteration did not converge in {max_iter} iterations", change, it)
    residual = float(np.max(np.abs(rbar + gamma * (P @ value_at_nodes(Q.reshape(shape))) - Q)))
    prov = {"kind": "fixed_point", "tol": tol, "iterations": it, "residual": residual, "gamma": gamma}
    return OracleQ(axes, Q.reshape(shape), order, prov)


def policy_value(qfn, target, initial, state_rule, action_rule):
    """``int F(ds) int pi(a|s) Q(s, a) da`` for a callable ``Q``."""
    nodes, w = initial.nodes_and_weights(state_rule)
    return float(np.dot(w, policy_average(qfn, target, nodes, action_rule)))


def oracle_value(oq, target, initial, state_rule=None, action_rule=None):
    """Value of ``target`` from initial law ``initial`` under the oracle Q."""
    box = [(ax[0], ax[-1]) for ax in oq.axes]
    ds = len(initial.state_box)
    state_rule = state_rule or tensor_gauss_rule(box[:ds], DEFAULT_STATE_NODES)
    action_rule = action_rule or tensor_gauss_rule(box[ds:], DEFAULT_ACTION_NODES)
    return policy_value(oq, target, initial, state_rule, action_rule)
