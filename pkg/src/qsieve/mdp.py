"""Synthetic continuous MDPs and batch data generation."""

from __future__ import annotations

import io
import os
import tempfile
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .distributions import PolicyDensity, check_normalization
from .errors import GenerationError, InputError
from .numerics import SeededStream, tensor_gauss_rule, uniform_grid

NOISE_CLIP = 4.0
DEFAULT_BURN_IN = 200


@dataclass
class MdpSpec:
    """Generative model of an environment on ``state_box x action_box``.

    ``reward_fn(S, A, Sp, Z)`` maps paired rows plus standard-normal draws
    ``Z`` to rewards; ``mean_reward_fn(S, A, Sp)`` is its conditional mean
    given the transition. ``r_max`` bounds ``|reward|`` everywhere. When the
    mean reward splits as ``f(s, a) + g(s')``, ``reward_split = (f, g)`` lets
    oracles integrate it without evaluating ``f`` at every next-state node.
    """

    state_box: tuple
    action_box: tuple
    transition: object
    reward_fn: Callable
    mean_reward_fn: Callable
    gamma: float
    r_max: float
    q_star: Optional[Callable] = None
    target: Optional[PolicyDensity] = None
    reward_split: Optional[tuple] = None
    description: dict = field(default_factory=dict)

    def __post_init__(self):
        self.state_box = tuple((float(lo), float(hi)) for lo, hi in self.state_box)
        self.action_box = tuple((float(lo), float(hi)) for lo, hi in self.action_box)
        if not 0.0 <= self.gamma < 1.0:
            raise InputError(f"discount must lie in [0, 1), got {self.gamma}")
        if not np.isfinite(self.r_max) or self.r_max <= 0:
            raise InputError("r_max must be a positive finite bound")

    @property
    def state_dim(self):
        return len(self.state_box)

    @property
    def action_dim(self):
        return len(self.action_box)

    @property
    def box(self):
        return self.state_box + self.action_box

    @property
    def is_designed(self):
        return self.q_star is not None


@dataclass
class Dataset:
    """``N`` trajectories of ``T`` transitions, arrays indexed ``[i, t]``."""

    states: np.ndarray  # (N, T, ds)
    actions: np.ndarray  # (N, T, da)
    rewards: np.ndarray  # (N, T)
    next_states: np.ndarray  # (N, T, ds)
    seed: Optional[int] = None
    burn_in: int = 0

    @property
    def N(self):
        return self.states.shape[0]

    @property
    def T(self):
        return self.states.shape[1]

    @property
    def size(self):
        return self.N * self.T

    @property
    def state_dim(self):
        return self.states.shape[2]

    @property
    def action_dim(self):
        return self.actions.shape[2]

    def flat(self):
        """Stacked ``(S, A, R, S')`` in (i, t) lexicographic order."""
        n = self.size
        return (
            self.states.reshape(n, -1),
            self.actions.reshape(n, -1),
            self.rewards.reshape(n),
            self.next_states.reshape(n, -1),
        )

    def take(self, traj_index):
        """Dataset made of the listed trajectories (repeats allowed)."""
        idx = np.asarray(traj_index, dtype=int)
        return Dataset(self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx], self.seed, self.burn_in)

    def _columns(self):
        ds, da = self.state_dim, self.action_dim
        return ["traj", "t"] + [f"s_{k + 1}" for k in range(ds)] + [f"a_{k + 1}" for k in range(da)] + ["r"] + [
            f"sp_{k + 1}" for k in range(ds)
        ]

    def to_csv(self, path):
        S, A, R, Sp = self.flat()
        traj, t = np.divmod(np.arange(self.size), self.T)
        table = np.column_stack([traj, t, S, A, R, Sp])
        buf = io.StringIO()
        buf.write(",".join(self._columns()) + "\n")
        fmt = ["%d", "%d"] + ["%.17g"] * (table.shape[1] - 2)
        np.savetxt(buf, table, fmt=fmt, delimiter=",")
        atomic_write_text(path, buf.getvalue())

    @classmethod
    def from_csv(cls, path):
        with open(path) as fh:
            header = fh.readline().strip().split(",")
        if header[:2] != ["traj", "t"] or "r" not in header:
            raise InputError(f"{path}: not a dataset CSV (header {header})")
        ds = sum(1 for h in header if h.startswith("s_"))
        da = sum(1 for h in header if h.startswith("a_"))
        if len(header) != 3 + 2 * ds + da or sum(1 for h in header if h.startswith("sp_")) != ds:
            raise InputError(f"{path}: inconsistent dataset header {header}")
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        traj = table[:, 0].astype(int)
        t = table[:, 1].astype(int)
        N, T = traj.max() + 1, t.max() + 1
        if table.shape[0] != N * T or np.any(traj * T + t != np.arange(N * T)):
            raise InputError(f"{path}: rows are not a complete (traj, t) lexicographic grid")
        c = 2
        S = table[:, c : c + ds]
        A = table[:, c + ds : c + ds + da]
        R = table[:, c + ds + da]
        Sp = table[:, c + ds + da + 1 :]
        return cls(S.reshape(N, T, ds), A.reshape(N, T, da), R.reshape(N, T), Sp.reshape(N, T, ds))

    def save(self, path):
        """Binary container (``.npz``) including the seed record."""
        buf = io.BytesIO()
        np.savez(
            buf,
            states=self.states,
            actions=self.actions,
            rewards=self.rewards,
            next_states=self.next_states,
            seed=np.array(-1 if self.seed is None else self.seed, dtype=np.int64),
            burn_in=np.array(self.burn_in, dtype=np.int64),
        )
        atomic_write_bytes(path, buf.getvalue())

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            seed = int(z["seed"])
            return cls(
                z["states"], z["actions"], z["rewards"], z["next_states"], None if seed < 0 else seed, int(z["burn_in"])
            )


def atomic_write_bytes(path, data):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def _check_inside(X, box, what, step):
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])
    bad = ~np.all((X >= lo) & (X <= hi) & np.isfinite(X), axis=1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise GenerationError(f"{what} {X[i].tolist()} of trajectory {i} left the box at step {step}")


def sample_trajectories(mdp, behavior, N, T, burn_in=DEFAULT_BURN_IN, seed=0, initial_states=None):
    """Simulate ``N`` trajectories of length ``T`` under ``behavior``.

    Each trajectory owns the stream ``SeededStream(seed, i)``; the chain starts
    uniformly on the state box (or at ``initial_states``) and the first
    ``burn_in`` steps are discarded to approximate stationarity. Output is a
    deterministic function of ``(mdp, behavior, N, T, burn_in, seed)``.
    """
    N, T, burn_in = int(N), int(T), int(burn_in)
    if N < 1 or T < 1 or burn_in < 0:
        raise InputError("N and T must be >= 1 and burn_in >= 0")
    ds, da = mdp.state_dim, mdp.action_dim
    steps = burn_in + T
    U0 = np.empty((N, ds))
    Ua = np.empty((N, steps, da))
    Us = np.empty((N, steps, ds))
    Z = np.empty((N, T))
    for i in range(N):
        stream = SeededStream(seed, i)
        U0[i] = stream.uniform(ds)
        Ua[i] = stream.uniform((steps, da))
        Us[i] = stream.uniform((steps, ds))
        Z[i] = stream.normal(T)
    lo = np.array([b[0] for b in mdp.state_box])
    hi = np.array([b[1] for b in mdp.state_box])
    if initial_states is None:
        S = lo + U0 * (hi - lo)
    else:
        S = np.broadcast_to(np.asarray(initial_states, dtype=float), (N, ds)).copy()
        _check_inside(S, mdp.state_box, "initial state", 0)
    states = np.empty((N, T, ds))
    actions = np.empty((N, T, da))
    rewards = np.empty((N, T))
    for step in range(steps):
        A = behavior.sample(S, Ua[:, step])
        _check_inside(A, mdp.action_box, "action", step)
        Sp = mdp.transition.sample(S, A, Us[:, step])
        _check_inside(Sp, mdp.state_box, "state", step)
        t = step - burn_in
        if t >= 0:
            states[:, t] = S
            actions[:, t] = A
            rewards[:, t] = mdp.reward_fn(S, A, Sp, Z[:, t])
        S = Sp
    next_states = np.empty_like(states)
    next_states[:, :-1] = states[:, 1:]
    next_states[:, -1] = S
    return Dataset(states, actions, rewards, next_states, seed=int(seed), burn_in=burn_in)


def policy_average(fn, policy, S, action_rule):
    """``int pi(a|s) fn(s, a) da`` for each row of ``S``.

    ``fn(S_rep, A_rep)`` is evaluated on paired rows.
    """
    S = np.asarray(S, dtype=float)
    n = S.shape[0]
    if policy.is_point_mass:
        return np.asarray(fn(S, policy.location(S)), dtype=float)
    m = action_rule.size
    S_rep = np.repeat(S, m, axis=0)
    A_rep = np.tile(action_rule.nodes, (n, 1))
    vals = np.asarray(fn(S_rep, A_rep), dtype=float).reshape(n, m)
    w = policy.density_matrix(S, action_rule.nodes) * action_rule.weights
    return np.sum(w * vals, axis=1)


def designed_q_mdp(
    q_star,
    transition,
    target,
    gamma,
    noise_sd,
    action_box,
    action_rule=None,
    bound_grid=101,
):
    """MDP whose Q-function under ``target`` is exactly ``q_star``.

    The reward is ``q_star(s, a) - gamma * V(s') + noise_sd * clip(z, -4, 4)``
    with ``V(s') = int target(a'|s') q_star(s', a') da'`` (quadrature) and
    ``z`` standard normal. The clip is symmetric so the noise has mean zero
    given ``(s, a, s')``, and the unique Bellman fixed point is ``q_star``.
    """
    state_box = transition.state_box
    action_box = tuple((float(lo), float(hi)) for lo, hi in action_box)
    if noise_sd < 0:
        raise InputError("noise_sd must be non-negative")
    if action_rule is None:
        action_rule = tensor_gauss_rule(action_box, 48)
    check_normalization(target, state_box, action_rule)
    ds = len(state_box)

    def v_star(Sp):
        return policy_average(q_star, target, Sp, action_rule)

    grid, _ = uniform_grid(state_box + action_box, bound_grid if ds + len(action_box) <= 2 else 21)
    q_vals = np.asarray(q_star(grid[:, :ds], grid[:, ds:]), dtype=float)
    sgrid, _ = uniform_grid(state_box, bound_grid if ds <= 2 else 21)
    v_vals = v_star(sgrid)
    if not (np.all(np.isfinite(q_vals)) and np.all(np.isfinite(v_vals))):
        raise InputError("q_star is not bounded on the state-action box")
    q_sup = float(np.max(np.abs(q_vals)))
    if q_sup > 1e12:
        raise InputError("q_star is not bounded on the state-action box")
    # grid sup is a lower bound of the true sup; inflate slightly
    r_max = 1.05 * (q_sup + gamma * float(np.max(np.abs(v_vals)))) + NOISE_CLIP * noise_sd + 1e-12

    def mean_reward(S, A, Sp):
        return np.asarray(q_star(S, A), dtype=float) - gamma * v_star(Sp)

    def reward(S, A, Sp, Z):
        return mean_reward(S, A, Sp) + noise_sd * np.clip(Z, -NOISE_CLIP, NOISE_CLIP)

    return MdpSpec(
        state_box,
        action_box,
        transition,
        reward,
        mean_reward,
        float(gamma),
        r_max,
        q_star=q_star,
        target=target,
        reward_split=(q_star, lambda Sp: -gamma * v_star(Sp)),
        description={"kind": "designed_q", "noise_sd": float(noise_sd)},
    )
