"""Sieve two-stage least squares for the Q-function of a target policy.

The estimator solves the conditional moment ``E[R - Gamma(c) | S, A] = 0``
with ``Gamma = psi(S, A) - gamma * psi_pi(S')`` projected onto the instrument
basis ``b``:

    c_hat = [Gamma' P_B Gamma]^- Gamma' P_B R,    P_B = B (B'B)^- B'.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .basis import BasisSpec, eval_basis, eval_basis_deriv, policy_basis
from .errors import CapabilityError, ConfigError, InputError, NumericalError
from .mdp import atomic_write_text
from .numerics import DEFAULT_RTOL, SeededStream, pinv_truncated, sym_inv_sqrt, tensor_gauss_rule, uniform_grid

SIEVE_FIT_SCHEMA = 1
DEFAULT_K_RATIO = 2.0
DEFAULT_ACTION_NODES = 48
BOOTSTRAP_STREAM = 0x5EED


def default_action_rule(spec, state_dim, nodes=DEFAULT_ACTION_NODES):
    return tensor_gauss_rule(spec.domain[state_dim:], nodes)


@dataclass(frozen=True)
class AssembledSystem:
    """Sample sieve matrices with rows in (trajectory, time) order.

    ``traj`` holds the trajectory index of every row, used for resampling.
    """

    Psi: np.ndarray
    B: np.ndarray
    G_pi: np.ndarray
    R: np.ndarray
    gamma: float
    psi_spec: BasisSpec
    b_spec: BasisSpec
    traj: np.ndarray = field(repr=False)

    @property
    def n(self):
        return self.Psi.shape[0]

    @property
    def J(self):
        return self.Psi.shape[1]

    @property
    def K(self):
        return self.B.shape[1]

    @property
    def Gamma(self):
        return self.Psi - self.gamma * self.G_pi


def _freeze(a, dtype=float):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.flags.writeable = False
    return a


def check_dimensions(psi_spec, b_spec, max_ratio=DEFAULT_K_RATIO):
    J, K = psi_spec.size, b_spec.size
    if K < J:
        raise ConfigError(f"instrument basis has K={K} < J={J} functions")
    if K > max_ratio * J:
        raise ConfigError(f"K={K} exceeds {max_ratio} * J = {max_ratio * J}")
    if psi_spec.domain != b_spec.domain:
        raise ConfigError("psi and b bases must share the same domain")


def assemble(dataset, psi_spec, b_spec, target, gamma, rule=None, max_ratio=DEFAULT_K_RATIO):
    """Evaluate ``Psi``, ``B``, ``G_pi`` and stack the rewards.

    Parameters
    ----------
    dataset : Dataset
    psi_spec, b_spec : BasisSpec
        Bases for the Q-function and the instruments, ``J <= K <= max_ratio * J``.
    target : PolicyDensity
    gamma : float
    rule : QuadratureRule, optional
        Rule over the action box for ``psi_pi``; ignored for point-mass targets.
    """
    if not 0.0 <= gamma < 1.0:
        raise InputError(f"discount must lie in [0, 1), got {gamma}")
    check_dimensions(psi_spec, b_spec, max_ratio)
    S, A, R, Sp = dataset.flat()
    ds = S.shape[1]
    if ds + A.shape[1] != psi_spec.dim:
        raise InputError(f"data has {ds + A.shape[1]} state-action coordinates, basis has {psi_spec.dim}")
    X = np.hstack([S, A])
    if rule is None and not target.is_point_mass:
        rule = default_action_rule(psi_spec, ds)
    Psi = eval_basis(psi_spec, X)
    B = Psi if b_spec == psi_spec else eval_basis(b_spec, X)
    G_pi = policy_basis(psi_spec, target, Sp, rule)
    traj = np.repeat(np.arange(dataset.N), dataset.T)
    return AssembledSystem(
        _freeze(Psi), _freeze(B), _freeze(G_pi), _freeze(R), float(gamma), psi_spec, b_spec, _freeze(traj, np.int64)
    )


@dataclass(frozen=True)
class SieveFit:
    """Fitted coefficients with the specs and solve diagnostics.

    Immutable; ``coef`` is a read-only array.
    """

    coef: np.ndarray
    psi_spec: BasisSpec
    b_spec: BasisSpec
    gamma: float
    rtol: float
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "coef", _freeze(self.coef))
        if not np.all(np.isfinite(self.coef)):
            raise NumericalError("fitted coefficients are not finite")

    @property
    def J(self):
        return self.coef.size

    def to_dict(self):
        return {
            "schema_version": SIEVE_FIT_SCHEMA,
            "coef": [float(c) for c in self.coef],
            "psi": self.psi_spec.to_dict(),
            "b": self.b_spec.to_dict(),
            "gamma": self.gamma,
            "rtol": self.rtol,
            "diagnostics": self.diagnostics,
        }

    def to_json(self):
        # json writes floats with repr, which round-trips binary64 exactly
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(
                np.array(d["coef"], dtype=float),
                BasisSpec.from_dict(d["psi"]),
                BasisSpec.from_dict(d["b"]),
                float(d["gamma"]),
                float(d["rtol"]),
                dict(d.get("diagnostics", {})),
            )
        except (KeyError, TypeError) as exc:
            raise InputError(f"not a sieve fit document: {exc}") from None

    @classmethod
    def from_json(cls, text):
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise InputError(f"sieve fit JSON is malformed: {exc}") from None

    def save(self, path):
        atomic_write_text(path, self.to_json())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(fh.read())


def _cond(s):
    return float(s[0] / s[-1]) if s[-1] > 0 else float("inf")


def solve_moments(BtB, BtGamma, BtR, n, rtol=DEFAULT_RTOL):
    """2SLS solve from the cross-moment matrices.

    Whitens by ``(B'B/n)^{-1/2}`` so the outer inverse acts on a matrix with
    the conditioning of ``Gamma`` projected on an orthonormal instrument
    basis. Truncating the singular values of ``X`` at ``sqrt(rtol)`` is the
    same as truncating the eigenvalues of ``X'X`` at ``rtol``.

    Returns ``(coef, info)``.
    """
    Gb = BtB / n
    W, rank_b = sym_inv_sqrt(0.5 * (Gb + Gb.T), rtol)
    X = W @ (BtGamma / n)
    y = W @ (BtR / n)
    coef = pinv_truncated(X, math.sqrt(rtol)) @ y
    sx = np.linalg.svd(X, compute_uv=False)
    sb = np.linalg.eigvalsh(0.5 * (Gb + Gb.T))[::-1]
    rank_x = int(np.sum(sx > math.sqrt(rtol) * sx[0])) if sx[0] > 0 else 0
    grad = n * (X.T @ (y - X @ coef))
    info = {
        "rank_BtB": rank_b,
        "K": int(BtB.shape[0]),
        "rank_projected": rank_x,
        "J": int(BtGamma.shape[1]),
        "rank_deficient_B": rank_b < BtB.shape[0],
        "rank_deficient_projected": rank_x < BtGamma.shape[1],
        "cond_Gb": _cond(np.maximum(sb, 0.0)),
        "cond_projected": _cond(sx),
        "s_min_projected": float(sx[-1]),
        "gradient_inf": float(np.max(np.abs(grad))),
    }
    return coef, info


def fit_2sls(sys, rtol=DEFAULT_RTOL):
    """Sieve 2SLS estimate from an assembled system.

    Rank deficiency of ``B'B`` or of the projected system is handled by the
    truncated pseudo inverse and reported in ``diagnostics``.
    """
    if sys.n < sys.K:
        raise InputError(f"{sys.n} rows are fewer than K={sys.K} instruments")
    Gamma = sys.Gamma
    for name, M in (("Psi", sys.Psi), ("B", sys.B), ("G_pi", sys.G_pi), ("R", sys.R)):
        if not np.all(np.isfinite(M)):
            raise InputError(f"{name} contains non-finite entries")
    coef, info = solve_moments(sys.B.T @ sys.B, sys.B.T @ Gamma, sys.B.T @ sys.R, sys.n, rtol)
    info["n"] = int(sys.n)
    info["gradient_tolerance_scale"] = float(np.linalg.norm(sys.R))
    return SieveFit(coef, sys.psi_spec, sys.b_spec, sys.gamma, float(rtol), info)


def fit_dataset(dataset, psi_spec, b_spec, target, gamma, rule=None, rtol=DEFAULT_RTOL, max_ratio=DEFAULT_K_RATIO):
    sys = assemble(dataset, psi_spec, b_spec, target, gamma, rule, max_ratio)
    return fit_2sls(sys, rtol), sys


def predict_q(fit, points):
    """``psi(x)' c_hat`` at each row of ``points``."""
    return eval_basis(fit.psi_spec, points) @ fit.coef


def predict_q_deriv(fit, points, alpha):
    return eval_basis_deriv(fit.psi_spec, points, alpha) @ fit.coef


def _split(points, ds):
    X = np.asarray(points, dtype=float)
    return X[:, :ds], X[:, ds:]


def bellman_residual(fit, mdp, target, points, state_rule=None, action_rule=None):
    """``r(s, a) + gamma (P^pi Q_hat)(s, a) - Q_hat(s, a)`` at ``points``.

    Uses the MDP's discount, which may differ from the one used in fitting.
    """
    from .oracle import default_rules, mean_reward, transition_weights

    sr, ar = default_rules(mdp)
    state_rule = state_rule or sr
    action_rule = action_rule or ar
    ds = mdp.state_dim
    X = np.asarray(points, dtype=float)
    S, A = _split(X, ds)
    V_nodes = policy_basis(fit.psi_spec, target, state_rule.nodes, action_rule) @ fit.coef
    out = np.empty(X.shape[0])
    for start in range(0, X.shape[0], 4096):
        sl = slice(start, start + 4096)
        P = transition_weights(mdp, S[sl], A[sl], state_rule)
        out[sl] = mean_reward(mdp, S[sl], A[sl], state_rule) + mdp.gamma * (P @ V_nodes) - predict_q(fit, X[sl])
    return out


def bellman_residual_norms(fit, mdp, target, grid=None, weighted=None, state_rule=None, action_rule=None):
    """Sup over ``grid`` and weighted L2 norm of the Bellman residual.

    Parameters
    ----------
    grid : ndarray, optional
        Points for the sup norm; defaults to a 201-per-dimension grid (51 when
        the box has more than two dimensions).
    weighted : (nodes, weights), optional
        Quadrature against the data density, e.g. from
        :meth:`qsieve.oracle.StationaryLaw.joint_rule`. Without it the L2
        norm is the root mean square over ``grid``.
    """
    if grid is None:
        grid, _ = uniform_grid(mdp.box, 201 if len(mdp.box) <= 2 else 51)
    res = bellman_residual(fit, mdp, target, grid, state_rule, action_rule)
    if weighted is None:
        l2 = float(np.sqrt(np.mean(res**2)))
    else:
        nodes, w = weighted
        r2 = bellman_residual(fit, mdp, target, nodes, state_rule, action_rule)
        l2 = float(np.sqrt(np.dot(w, r2**2) / np.sum(w)))
    return {"sup": float(np.max(np.abs(res))), "l2": l2}


def value_functional(psi_spec, target, initial, state_rule=None, action_rule=None):
    """Vector ``v`` with ``v' c`` the plug-in value of coefficients ``c``."""
    ds = len(initial.state_box)
    if state_rule is None and not initial.is_point_mass:
        state_rule = tensor_gauss_rule(psi_spec.domain[:ds], 64)
    if action_rule is None and not target.is_point_mass:
        action_rule = default_action_rule(psi_spec, ds)
    nodes, w = initial.nodes_and_weights(state_rule)
    return w @ policy_basis(psi_spec, target, nodes, action_rule)


def plugin_value(fit, target, initial, state_rule=None, action_rule=None):
    """``int F(ds) int pi(a|s) Q_hat(s, a) da``."""
    return float(value_functional(fit.psi_spec, target, initial, state_rule, action_rule) @ fit.coef)


def _per_trajectory_moments(sys):
    N = int(sys.traj[-1]) + 1
    Gamma = sys.Gamma
    K, J = sys.K, sys.J
    BtB = np.zeros((N, K, K))
    BtG = np.zeros((N, K, J))
    BtR = np.zeros((N, K))
    counts = np.bincount(sys.traj, minlength=N)
    for i, (lo, hi) in enumerate(zip(np.cumsum(counts) - counts, np.cumsum(counts))):
        Bi = sys.B[lo:hi]
        BtB[i] = Bi.T @ Bi
        BtG[i] = Bi.T @ Gamma[lo:hi]
        BtR[i] = Bi.T @ sys.R[lo:hi]
    return BtB, BtG, BtR, counts


def bootstrap_coefficients(sys, n_boot=200, seed=0, rtol=DEFAULT_RTOL):
    """Refit on trajectory-resampled data; returns an (n_boot, J) array.

    Resampling whole trajectories keeps the time dependence inside each
    trajectory. Per-trajectory cross moments are summed with multinomial
    counts, so each replicate costs one small solve.
    """
    BtB, BtG, BtR, rows = _per_trajectory_moments(sys)
    N = BtB.shape[0]
    rng = SeededStream(seed, BOOTSTRAP_STREAM).generator
    out = np.empty((n_boot, sys.J))
    for r in range(n_boot):
        w = np.bincount(rng.integers(0, N, size=N), minlength=N).astype(float)
        n = float(w @ rows)
        out[r] = solve_moments(
            np.tensordot(w, BtB, axes=1), np.tensordot(w, BtG, axes=1), w @ BtR, n, rtol
        )[0]
    return out


def bootstrap_value_se(sys, fit, target, initial, n_boot=200, seed=0, state_rule=None, action_rule=None):
    """Plug-in value with a trajectory-bootstrap standard error."""
    v = value_functional(fit.psi_spec, target, initial, state_rule, action_rule)
    draws = bootstrap_coefficients(sys, n_boot, seed, fit.rtol) @ v
    return float(v @ fit.coef), float(np.std(draws, ddof=1))


def balanced_counts(target_size, dim, min_count=1):
    """Smallest near-cubic tensor shape with at least ``target_size`` cells.

    Per-dimension counts differ by at most one and are ``>= min_count``.
    """
    target_size = max(1, int(math.ceil(target_size - 1e-9)))
    m = max(int(min_count), 1)
    while True:
        for extra in range(dim + 1):
            counts = (m + 1,) * extra + (m,) * (dim - extra)
            if int(np.prod(counts)) >= target_size:
                return counts
        m += 1


def j_rule_value(NT, p, d, norm="l2", multiplier=1.0):
    """Unrounded ``multiplier * base^(d / (2p + d))``."""
    if NT < 2:
        raise InputError("NT must be >= 2")
    if p <= 0 or multiplier <= 0:
        raise InputError("p and multiplier must be positive")
    if norm == "sup":
        if not 2 * p > d:
            raise CapabilityError(f"sup-norm rule needs 2p > d (p={p}, d={d})")
        base = NT / math.log(NT)
    elif norm == "l2":
        base = float(NT)
    else:
        raise InputError(f"norm must be 'sup' or 'l2', got {norm!r}")
    return multiplier * base ** (d / (2.0 * p + d))


def choose_counts(NT, p, d, norm="l2", multiplier=1.0, min_count=1):
    """Per-dimension counts for the rate-optimal sieve dimension."""
    return balanced_counts(round(j_rule_value(NT, p, d, norm, multiplier)), d, min_count)


def choose_J(NT, p, d, norm="l2", multiplier=1.0, min_count=1):
    """Rate-optimal J rounded up to a balanced tensor size.

    >>> choose_J(10_000, 2, 2)
    25
    """
    return int(np.prod(choose_counts(NT, p, d, norm, multiplier, min_count)))


def _family_min(family, degree):
    return degree + 1 if family == "bspline" else 1


def select_multiplier(
    dataset,
    family,
    domain,
    target,
    gamma,
    p,
    norm="l2",
    multipliers=(0.5, 1.0, 2.0),
    holdout_fraction=0.25,
    degree=3,
    rule=None,
    rtol=DEFAULT_RTOL,
):
    """Pick the J-rule multiplier by the holdout projected Bellman residual.

    Trajectories are split into a training and a holdout part. Each candidate
    is fitted on the training part; the criterion is the squared norm of the
    holdout moment vector ``G_b^{-1/2} B'(R - Gamma c) / n`` with a common
    instrument basis (the largest candidate's), so candidates are compared
    on the same scale.

    Returns ``(best_multiplier, table)`` where ``table`` maps multiplier to
    ``(J, criterion)``.
    """
    N = dataset.N
    n_hold = max(1, int(round(holdout_fraction * N)))
    if N - n_hold < 1:
        raise InputError("need at least two trajectories for holdout selection")
    train = dataset.take(np.arange(N - n_hold))
    hold = dataset.take(np.arange(N - n_hold, N))
    d = len(domain)
    mn = _family_min(family, degree)
    specs = {}
    for m in multipliers:
        counts = choose_counts(train.size, p, d, norm, m, mn)
        specs[m] = BasisSpec(family, counts, domain, degree)
    ref = max(specs.values(), key=lambda s: s.size)
    S, A, R, Sp = hold.flat()
    Bh = eval_basis(ref, np.hstack([S, A]))
    n = Bh.shape[0]
    W, _ = sym_inv_sqrt(Bh.T @ Bh / n, rtol)
    table = {}
    for m, spec in specs.items():
        fit, _ = fit_dataset(train, spec, spec, target, gamma, rule, rtol)
        hsys = assemble(hold, spec, spec, target, gamma, rule)
        moment = W @ (Bh.T @ (R - hsys.Gamma @ fit.coef)) / n
        table[m] = (spec.size, float(moment @ moment))
    best = min(multipliers, key=lambda m: (table[m][1], m))
    return best, table
