"""Named MDP designs used by the CLI and the rate harness.

A recipe bundles an :class:`~qsieve.mdp.MdpSpec` with its behaviour and
target policies and an initial-state law. Designed recipes carry their exact
Q-function, which makes them usable as ground truth in rate studies.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .basis import BasisSpec, eval_basis
from .distributions import InitialDistribution, TruncatedGaussianPolicy, TruncatedGaussianTransition
from .errors import ConfigError
from .mdp import designed_q_mdp

UNIT = ((0.0, 1.0),)


@dataclass
class Recipe:
    name: str
    mdp: object
    behavior: object
    target: object
    initial: object
    smoothness: float
    params: dict = field(default_factory=dict)

    @property
    def q_star(self):
        return self.mdp.q_star


def _kink(x, c):
    return np.maximum(x - c, 0.0) ** 2


def benchmark_q(S, A):
    """Smooth part plus squared hinges, so the second derivative jumps (p = 2)."""
    s = np.asarray(S, dtype=float)[:, 0]
    a = np.asarray(A, dtype=float)[:, 0]
    return np.sin(np.pi * s) * np.cos(0.5 * np.pi * a) + _kink(s, 0.37) - 0.8 * _kink(a, 0.61)


def _transition(sd=0.25):
    def mean(S, A):
        return 0.5 + 0.6 * (S - 0.5) + 0.3 * (A - 0.5)

    return TruncatedGaussianTransition(mean, sd, UNIT, description="ar1 drift 0.6 s + 0.3 a")


def _behavior(sd=0.6):
    return TruncatedGaussianPolicy(lambda S: np.full((S.shape[0], 1), 0.5), sd, UNIT, description="broad centred")


def _target(sd=0.2):
    return TruncatedGaussianPolicy(lambda S: 0.3 + 0.4 * S, sd, UNIT, description="mean 0.3 + 0.4 s")


def benchmark(gamma=0.9, noise_sd=0.5):
    """One-dimensional state and action on the unit square with a p = 2 Q-function."""
    target = _target()
    mdp = designed_q_mdp(benchmark_q, _transition(), target, gamma, noise_sd, UNIT)
    return Recipe(
        "benchmark",
        mdp,
        _behavior(),
        target,
        InitialDistribution.uniform(UNIT),
        smoothness=2.0,
        params={"gamma": gamma, "noise_sd": noise_sd},
    )


def smooth(gamma=0.9, noise_sd=0.5):
    """Same chain with the analytic part of the benchmark Q-function only."""
    target = _target()

    def q(S, A):
        return np.sin(np.pi * S[:, 0]) * np.cos(0.5 * np.pi * A[:, 0])

    mdp = designed_q_mdp(q, _transition(), target, gamma, noise_sd, UNIT)
    return Recipe("smooth", mdp, _behavior(), target, InitialDistribution.uniform(UNIT), np.inf,
                  {"gamma": gamma, "noise_sd": noise_sd})


def in_span_coefficients(per_dim_count=(4, 4), seed=7):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1.0, 1.0, size=int(np.prod(per_dim_count)))


def in_span(gamma=0.9, noise_sd=0.0, per_dim_count=(4, 4), seed=7):
    """Q-function inside the span of a cubic B-spline tensor basis.

    ``noise_sd = 0`` gives noiseless data from which the coefficients are
    recovered exactly by a basis containing this one.
    """
    spec = BasisSpec("bspline", per_dim_count, UNIT + UNIT, 3)
    coef = in_span_coefficients(per_dim_count, seed)

    def q(S, A):
        return eval_basis(spec, np.hstack([S, A])) @ coef

    target = _target()
    mdp = designed_q_mdp(q, _transition(), target, gamma, noise_sd, UNIT)
    return Recipe(
        "in_span",
        mdp,
        _behavior(),
        target,
        InitialDistribution.uniform(UNIT),
        smoothness=np.inf,
        params={"gamma": gamma, "noise_sd": noise_sd, "per_dim_count": list(per_dim_count), "seed": seed,
                "coefficients": coef.tolist()},
    )


RECIPES = {"benchmark": benchmark, "smooth": smooth, "in_span": in_span}


def get_recipe(name, **params):
    try:
        factory = RECIPES[name]
    except KeyError:
        raise ConfigError(f"unknown recipe {name!r}; available: {sorted(RECIPES)}") from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for recipe {name!r}: {exc}") from None
