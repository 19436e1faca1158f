"""Ill-posedness quantities and inequality checks for the sieve system.

Population matrices are estimated from weighted state-action points (Monte
Carlo draws from the behaviour chain, or a density-weighted quadrature rule)
with conditional expectations over the next state done by quadrature:

* ``G_psi = E[psi psi']`` and ``G_b = E[b b']``
* ``G_kappa = E[kappa kappa']`` with ``kappa = psi(S, A) - gamma psi_pi(S')``
* ``G_T = E[(T kappa)(T kappa)']`` where ``T`` averages over ``S'``
* ``Sigma = E[b kappa']``
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .basis import eval_basis, policy_basis
from .errors import InputError
from .mdp import atomic_write_text, policy_average, sample_trajectories
from .numerics import (
    DEFAULT_RTOL,
    min_singular,
    pinv_truncated,
    sym_eig_extremes,
    sym_inv_sqrt,
    uniform_grid,
)
from .oracle import StationaryLaw, default_rules, transition_weights

REPORT_SCHEMA = 1


def theorem1_bound(p_min, p_max, gamma):
    """Coverage bound on the L2 ill-posedness of the Bellman NPIV model."""
    return math.sqrt(p_max * (1.0 + p_max * gamma**2 / p_min)) / (math.sqrt(p_min) * (1.0 - gamma))


def default_sup_grid(dim):
    return 201 if dim <= 2 else 51 if dim <= 4 else 11


@dataclass
class IllPosednessReport:
    J: int
    K: int
    gamma: float
    e_J: float
    omega_J: float
    s_JK: float
    tau_J_estimate: float
    zeta_b: float
    zeta_kappa: float
    xi_psi: float
    p_min: float
    p_max: float
    theorem1_bound: float
    coverage: dict = field(default_factory=dict)
    standard_errors: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    settings: dict = field(default_factory=dict)

    @property
    def zeta(self):
        return max(self.zeta_b, self.zeta_kappa)

    def to_dict(self):
        d = asdict(self)
        d["schema_version"] = REPORT_SCHEMA
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("schema_version", None)
        try:
            return cls(**d)
        except TypeError as exc:
            raise InputError(f"not an ill-posedness report: {exc}") from None

    def save(self, path):
        atomic_write_text(path, self.to_json())


def stationary_sample(mdp, behavior, n, seed=0, burn_in=200):
    """``n`` approximately stationary state-action draws, one chain each."""
    ds = sample_trajectories(mdp, behavior, n, 1, burn_in=burn_in, seed=seed)
    S, A, _, _ = ds.flat()
    return np.hstack([S, A])


@dataclass
class PopulationMatrices:
    G_psi: np.ndarray
    G_b: np.ndarray
    G_kappa: np.ndarray
    G_T: np.ndarray
    Sigma: np.ndarray


def population_matrices(mdp, target, psi_spec, b_spec, gamma, points, weights, state_rule, action_rule):
    """Weighted estimates of the population Gram and cross matrices."""
    ds = mdp.state_dim
    w = np.asarray(weights, dtype=float)
    X = np.asarray(points, dtype=float)
    Psi = eval_basis(psi_spec, X)
    Bm = Psi if b_spec == psi_spec else eval_basis(b_spec, X)
    Wq = transition_weights(mdp, X[:, :ds], X[:, ds:], state_rule)  # (n, m)
    Pn = policy_basis(psi_spec, target, state_rule.nodes, action_rule)  # (m, J)
    M1 = Wq @ Pn  # E[psi_pi(S') | S, A]
    omega = w @ Wq
    TK = Psi - gamma * M1
    wPsi = Psi * w[:, None]
    G_psi = Psi.T @ wPsi
    G_kappa = G_psi - gamma * (wPsi.T @ M1 + M1.T @ wPsi) + gamma**2 * (Pn.T * omega) @ Pn
    G_T = TK.T @ (TK * w[:, None])
    Sigma = (Bm * w[:, None]).T @ TK
    G_b = Bm.T @ (Bm * w[:, None])
    sym = lambda M: 0.5 * (M + M.T)  # noqa: E731
    return PopulationMatrices(sym(G_psi), sym(G_b), sym(G_kappa), sym(G_T), Sigma)


def _tau(G_kappa, G_T, rtol):
    """``sqrt`` of the top generalized eigenvalue of ``(G_kappa, G_T)``."""
    W, rank = sym_inv_sqrt(G_T, rtol)
    M = W @ G_kappa @ W
    return math.sqrt(max(sym_eig_extremes(0.5 * (M + M.T))[1], 0.0)), rank


def _scalars(P, rtol):
    e_J = sym_eig_extremes(P.G_kappa)[0]
    omega_J = sym_eig_extremes(P.G_psi)[0]
    tau, rank_T = _tau(P.G_kappa, P.G_T, rtol)
    Wb, rank_b = sym_inv_sqrt(P.G_b, rtol)
    Wk, rank_k = sym_inv_sqrt(P.G_kappa, rtol)
    s_JK = min_singular(Wb @ P.Sigma @ Wk)
    ranks = {"G_T": rank_T, "G_b": rank_b, "G_kappa": rank_k}
    return {"e_J": e_J, "omega_J": omega_J, "tau_J_estimate": tau, "s_JK": s_JK}, ranks


def _sup_norms(mdp, target, psi_spec, b_spec, gamma, P, grid_per_dim, action_rule, rtol):
    """Grid suprema for zeta_b, zeta_kappa and xi_psi."""
    grid, _ = uniform_grid(mdp.box, grid_per_dim)
    sgrid, _ = uniform_grid(mdp.state_box, grid_per_dim)
    Psi = eval_basis(psi_spec, grid)
    Bm = Psi if b_spec == psi_spec else eval_basis(b_spec, grid)
    Wb, _ = sym_inv_sqrt(P.G_b, rtol)
    Wk, _ = sym_inv_sqrt(P.G_kappa, rtol)
    zeta_b = float(np.sqrt(np.max(np.sum((Bm @ Wb) ** 2, axis=1))))
    xi = float(np.max(np.sum(np.abs(Psi), axis=1)))
    # kappa(s, a, s') = psi(s, a) - gamma psi_pi(s') is separable, so the sup
    # of its whitened norm is a max over pairs of grid rows
    U = Psi @ Wk
    V = gamma * policy_basis(psi_spec, target, sgrid, action_rule) @ Wk
    uu = np.sum(U * U, axis=1)
    vv = np.sum(V * V, axis=1)
    best = 0.0
    for start in range(0, U.shape[0], 2048):
        blk = U[start : start + 2048]
        d2 = uu[start : start + 2048, None] + vv[None, :] - 2.0 * blk @ V.T
        best = max(best, float(d2.max()))
    return zeta_b, math.sqrt(max(best, 0.0)), xi


def compute_report(
    mdp,
    target,
    psi_spec,
    b_spec,
    gamma=None,
    mc_points=20000,
    behavior=None,
    law=None,
    seed=0,
    method="mc",
    quadrature_nodes=40,
    state_rule=None,
    action_rule=None,
    grid_per_dim=None,
    batches=10,
    rtol=DEFAULT_RTOL,
):
    """Estimate the ill-posedness quantities for bases ``psi`` and ``b``.

    Parameters
    ----------
    method : {"mc", "quadrature"}
        ``"mc"`` draws ``mc_points`` state-action pairs from the behaviour
        chain (after burn-in) and reports batch-means standard errors;
        ``"quadrature"`` uses a tensor Gauss rule weighted by the Nystrom
        stationary density and has no sampling error.
    grid_per_dim : int, optional
        Resolution of the grid for the suprema (lower bounds on the true
        suprema).

    Singular Gram matrices do not raise: the pseudo inverse is used and a
    flag is added to ``flags``.
    """
    if gamma is None:
        gamma = mdp.gamma
    if behavior is None and law is None:
        raise InputError("give the behaviour policy or a stationary law")
    law = law or StationaryLaw(mdp, behavior)
    behavior = behavior or law.behavior
    sr, ar = default_rules(mdp)
    state_rule = state_rule or sr
    action_rule = action_rule or ar
    if method == "mc":
        X = stationary_sample(mdp, behavior, int(mc_points), seed)
        w = np.full(X.shape[0], 1.0 / X.shape[0])
    elif method == "quadrature":
        X, w = law.joint_rule(quadrature_nodes)
    else:
        raise InputError(f"method must be 'mc' or 'quadrature', got {method!r}")
    args = (mdp, target, psi_spec, b_spec, gamma)
    P = population_matrices(*args, X, w, state_rule, action_rule)
    vals, ranks = _scalars(P, rtol)
    ses = {}
    if method == "mc" and batches >= 2:
        per = []
        for idx in np.array_split(np.arange(X.shape[0]), batches):
            Pb = population_matrices(*args, X[idx], np.full(idx.size, 1.0 / idx.size), state_rule, action_rule)
            per.append(_scalars(Pb, rtol)[0])
        for key in vals:
            arr = np.array([p[key] for p in per])
            ses[key] = float(np.std(arr, ddof=1) / math.sqrt(len(arr)))
    flags = []
    J, K = psi_spec.size, b_spec.size
    for name, r in ranks.items():
        full = K if name == "G_b" else J
        if r < full:
            flags.append(f"{name} numerically singular (rank {r} < {full})")
    gpd = grid_per_dim or default_sup_grid(len(mdp.box))
    zeta_b, zeta_k, xi = _sup_norms(*args, P, gpd, action_rule, rtol)
    cov = law.coverage(target)
    return IllPosednessReport(
        J=J,
        K=K,
        gamma=float(gamma),
        e_J=vals["e_J"],
        omega_J=vals["omega_J"],
        s_JK=vals["s_JK"],
        tau_J_estimate=vals["tau_J_estimate"],
        zeta_b=zeta_b,
        zeta_kappa=zeta_k,
        xi_psi=xi,
        p_min=cov["p_min"],
        p_max=cov["p_max"],
        theorem1_bound=theorem1_bound(cov["p_min"], cov["p_max"], gamma),
        coverage=cov,
        standard_errors=ses,
        flags=flags,
        settings={"method": method, "points": int(X.shape[0]), "seed": int(seed), "grid_per_dim": int(gpd),
                  "estimates": "coverage and suprema are grid estimates"},
    )


def check_ej_bound(report, gamma=None, slack=None):
    """Compare ``e_J`` with the coverage floor on the sieve Gram.

    The asserted floor is ``(p_min / p_max) (1 - gamma)^2 omega_J``; the
    variant with ``p_min^2`` is reported alongside. ``slack`` defaults to
    three standard errors of ``e_J`` when the report carries them.
    """
    gamma = report.gamma if gamma is None else gamma
    if slack is None:
        slack = 3.0 * report.standard_errors.get("e_J", 0.0)
    base = (1.0 - gamma) ** 2 * report.omega_J / report.p_max
    floor = report.p_min * base
    floor_sq = report.p_min**2 * base
    return {
        "passed": report.e_J >= floor - slack,
        "margin": report.e_J - floor,
        "floor": floor,
        "floor_pmin_squared": floor_sq,
        "margin_pmin_squared": report.e_J - floor_sq,
        "passed_pmin_squared": report.e_J >= floor_sq - slack,
        "slack": slack,
    }


def project_onto_sieve(f, psi_spec, weight_points, weights=None, rtol=DEFAULT_RTOL):
    """Weighted least-squares coefficients of ``f`` on the sieve.

    ``f`` is a callable on (n, d) points or an array of its values. Returns
    ``(coef, info)``; ``info["rank_deficient"]`` flags a singular design.
    """
    X = np.asarray(weight_points, dtype=float)
    y = np.asarray(f(X) if callable(f) else f, dtype=float)
    Psi = eval_basis(psi_spec, X)
    w = np.full(X.shape[0], 1.0 / X.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise InputError("projection weights must be non-negative")
    G = Psi.T @ (Psi * w[:, None])
    coef = pinv_truncated(0.5 * (G + G.T), rtol) @ (Psi.T @ (w * y))
    s = np.linalg.svd(G, compute_uv=False)
    rank = int(np.sum(s > rtol * s[0])) if s[0] > 0 else 0
    return coef, {"rank": rank, "rank_deficient": rank < psi_spec.size}


def _policy_values(fn, target, S, action_rule):
    return policy_average(fn, target, S, action_rule)


def check_wellposedness_l2(mdp, target, pairs, law, gamma=None, nodes_per_dim=40, state_rule=None,
                           action_rule=None, slack=1e-6):
    """Evaluate the three-term L2 chain for each pair ``(Q1, Q2)``.

    For ``D = Q1 - Q2`` the terms are

    * ``sqrt(p_min / p_max) (1 - gamma) ||D||``,
    * ``||T h(D)||`` with ``h(D)(s, a, s') = D(s, a) - gamma int pi(a'|s') D(s', a') da'``,
    * ``||h(D)||`` under the joint law of ``(S, A, S')``,

    all by quadrature against the stationary law. Margins are differences of
    consecutive terms; a pair violates when a margin is below ``-slack``.
    """
    gamma = mdp.gamma if gamma is None else gamma
    sr, ar = default_rules(mdp)
    state_rule = state_rule or sr
    action_rule = action_rule or ar
    ds = mdp.state_dim
    X, w = law.joint_rule(nodes_per_dim)
    w = w / np.sum(w)
    Wq = transition_weights(mdp, X[:, :ds], X[:, ds:], state_rule)
    cov = law.coverage(target)
    factor = math.sqrt(cov["p_min"] / cov["p_max"]) * (1.0 - gamma)
    rows = []
    for Q1, Q2 in pairs:
        def D(S, A, Q1=Q1, Q2=Q2):
            return np.asarray(Q1(S, A), dtype=float) - np.asarray(Q2(S, A), dtype=float)

        d = D(X[:, :ds], X[:, ds:])
        v = _policy_values(D, target, state_rule.nodes, action_rule)
        Th = d - gamma * (Wq @ v)
        h2 = Wq @ (v * v) * gamma**2 - 2.0 * gamma * d * (Wq @ v) + d * d * Wq.sum(axis=1)
        left = factor * math.sqrt(float(w @ (d * d)))
        middle = math.sqrt(float(w @ (Th * Th)))
        right = math.sqrt(max(float(w @ h2), 0.0))
        rows.append({"left": left, "middle": middle, "right": right,
                     "margin_lower": middle - left, "margin_upper": right - middle})
    violations = sum(1 for r in rows if r["margin_lower"] < -slack or r["margin_upper"] < -slack)
    return {"rows": rows, "violations": violations, "slack": slack, "coverage": cov}


def check_contraction(mdp, target, test_Qs, q_pi, gamma=None, grid_per_dim=101, state_rule=None,
                      action_rule=None, slack=1e-6):
    """Evaluate the sup-norm chain linking ``Q - Q^pi`` to its Bellman errors.

    For ``D = Q - Q^pi`` checks

        ||h(D)|| / (1 + gamma) <= ||D|| <= ||T h(D)|| / (1 - gamma) <= ||h(D)|| / (1 - gamma)

    with suprema over a grid augmented by the quadrature nodes, so that every
    value entering a quadrature sum is also a candidate for the supremum.
    """
    gamma = mdp.gamma if gamma is None else gamma
    sr, ar = default_rules(mdp)
    state_rule = state_rule or sr
    action_rule = action_rule or ar
    ds = mdp.state_dim
    _, s_axes = uniform_grid(mdp.state_box, grid_per_dim)
    _, a_axes = uniform_grid(mdp.action_box, grid_per_dim)
    s_axes = [np.union1d(ax, nodes) for ax, (nodes, _) in zip(s_axes, state_rule.axes)]
    a_axes = [np.union1d(ax, nodes) for ax, (nodes, _) in zip(a_axes, action_rule.axes)]
    mesh = np.meshgrid(*(s_axes + a_axes), indexing="ij")
    X = np.stack([m.ravel() for m in mesh], axis=1)
    smesh = np.meshgrid(*s_axes, indexing="ij")
    Sset = np.stack([m.ravel() for m in smesh], axis=1)
    Wq = np.vstack([
        transition_weights(mdp, X[i : i + 4096, :ds], X[i : i + 4096, ds:], state_rule)
        for i in range(0, X.shape[0], 4096)
    ])
    rows = []
    for Q in test_Qs:
        def D(S, A, Q=Q):
            return np.asarray(Q(S, A), dtype=float) - np.asarray(q_pi(S, A), dtype=float)

        d = D(X[:, :ds], X[:, ds:])
        v_nodes = _policy_values(D, target, state_rule.nodes, action_rule)
        v_set = _policy_values(D, target, Sset, action_rule)
        Th = d - gamma * (Wq @ v_nodes)
        h_sup = max(float(d.max() - gamma * v_set.min()), float(gamma * v_set.max() - d.min()))
        t1 = h_sup / (1.0 + gamma)
        t2 = float(np.max(np.abs(d)))
        t3 = float(np.max(np.abs(Th))) / (1.0 - gamma)
        t4 = h_sup / (1.0 - gamma)
        rows.append({"h_over_1pg": t1, "diff": t2, "Th_over_1mg": t3, "h_over_1mg": t4,
                     "margins": [t2 - t1, t3 - t2, t4 - t3]})
    violations = sum(1 for r in rows if min(r["margins"]) < -slack)
    return {"rows": rows, "violations": violations, "slack": slack, "points": int(X.shape[0])}
