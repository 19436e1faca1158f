"""Typed flat TOML configuration for fits and rate studies.

Every key has a declared type and default; unknown keys are errors so that
typos never silently fall back to defaults.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, fields

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


def _read_toml(path):
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: malformed TOML: {exc}") from None


def _coerce(name, value, kind):
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if kind == "float_or_select":
        if value == "select":
            return value
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{name} must be a number or 'select'")
    if kind == "int_list":
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{name} must be a list of integers")
        return tuple(value)
    if kind == "float_list":
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) for v in value):
            raise ConfigError(f"{name} must be a list of numbers")
        return tuple(float(v) for v in value)
    if kind == "alpha_list":
        if not isinstance(value, list) or not all(
            isinstance(a, list) and all(isinstance(v, int) and v >= 0 for v in a) for a in value
        ):
            raise ConfigError(f"{name} must be a list of non-negative integer lists")
        return tuple(tuple(a) for a in value)
    if kind in (str, int, bool, float):
        if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
            raise ConfigError(f"{name} must be of type {kind.__name__}, got {type(value).__name__}")
        return value
    raise AssertionError(kind)


def _build(cls, raw, source):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"{source}: unknown key(s) {unknown}")
    kwargs = {}
    for name, value in raw.items():
        kwargs[name] = _coerce(name, value, cls.TYPES[name])
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{source}: {exc}") from None


@dataclass(frozen=True)
class StudyConfig:
    """Rate-study settings.

    ``ladder_N`` and ``ladder_T`` give trajectory counts and lengths per
    ladder point; ``NT`` must increase strictly along the ladder.
    ``multiplier = "select"`` picks the J-rule constant per dataset from
    ``select_from`` by holdout Bellman residual.
    """

    recipe: str = "benchmark"
    gamma: float = 0.9
    noise_sd: float = 0.5
    psi_family: str = "bspline"
    b_family: str = ""
    degree: int = 3
    b_extra_per_dim: int = 0
    ladder_N: tuple = (20, 80, 320, 1280)
    ladder_T: tuple = (100, 100, 100, 100)
    burn_in: int = 200
    j_rule: str = "l2"
    multiplier: object = 1.0
    select_from: tuple = (0.5, 1.0, 2.0)
    smoothness: float = 2.0
    replications: int = 10
    alphas: tuple = ((1, 0),)
    seed: int = 0
    workers: int = 1
    sup_grid: int = 201
    error_inset: float = -1.0
    l2_nodes: int = 40
    output_csv: str = "rate_study.csv"
    output_json: str = "rate_study.json"

    TYPES = {
        "recipe": str,
        "gamma": float,
        "noise_sd": float,
        "psi_family": str,
        "b_family": str,
        "degree": int,
        "b_extra_per_dim": int,
        "ladder_N": "int_list",
        "ladder_T": "int_list",
        "burn_in": int,
        "j_rule": str,
        "multiplier": "float_or_select",
        "select_from": "float_list",
        "smoothness": float,
        "replications": int,
        "alphas": "alpha_list",
        "seed": int,
        "workers": int,
        "sup_grid": int,
        "error_inset": float,
        "l2_nodes": int,
        "output_csv": str,
        "output_json": str,
    }

    def __post_init__(self):
        if len(self.ladder_N) != len(self.ladder_T) or not self.ladder_N:
            raise ConfigError("ladder_N and ladder_T must be non-empty and of equal length")
        if min(self.ladder_N) < 1 or min(self.ladder_T) < 1:
            raise ConfigError("ladder entries must be positive")
        nt = self.ladder_NT
        if any(b <= a for a, b in zip(nt, nt[1:])):
            raise ConfigError(f"NT ladder must be strictly increasing, got {list(nt)}")
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        if self.j_rule not in ("l2", "sup"):
            raise ConfigError("j_rule must be 'l2' or 'sup'")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.multiplier != "select" and not self.multiplier > 0:
            raise ConfigError("multiplier must be positive")
        if self.smoothness <= 0:
            raise ConfigError("smoothness must be positive")
        if self.b_extra_per_dim < 0:
            raise ConfigError("b_extra_per_dim must be >= 0")

    @property
    def ladder_NT(self):
        return tuple(n * t for n, t in zip(self.ladder_N, self.ladder_T))

    @property
    def instrument_family(self):
        return self.b_family or self.psi_family

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = [list(x) if isinstance(x, tuple) else x for x in v]
        return d

    @classmethod
    def from_dict(cls, raw, source="config"):
        raw = {k: ([list(x) if isinstance(x, tuple) else x for x in v] if isinstance(v, (list, tuple)) else v)
               for k, v in raw.items()}
        return _build(cls, raw, source)

    @classmethod
    def load(cls, path):
        return _build(cls, _read_toml(path), str(path))

    def replace(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return StudyConfig.from_dict(d)


@dataclass(frozen=True)
class FitConfig:
    """Settings for a single fit from a dataset file."""

    recipe: str = "benchmark"
    gamma: float = 0.9
    noise_sd: float = 0.5
    psi_family: str = "bspline"
    b_family: str = ""
    degree: int = 3
    counts: tuple = ()
    b_counts: tuple = ()
    j_rule: str = "l2"
    multiplier: float = 1.0
    smoothness: float = 2.0
    rtol: float = 1e-10

    TYPES = {
        "recipe": str,
        "gamma": float,
        "noise_sd": float,
        "psi_family": str,
        "b_family": str,
        "degree": int,
        "counts": "int_list",
        "b_counts": "int_list",
        "j_rule": str,
        "multiplier": float,
        "smoothness": float,
        "rtol": float,
    }

    @classmethod
    def load(cls, path):
        return _build(cls, _read_toml(path), str(path))
