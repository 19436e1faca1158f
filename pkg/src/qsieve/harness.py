"""Rate studies: simulate, fit and score along an NT ladder.

Each (ladder point, replication) task draws its data from a seed derived
from ``(cfg.seed, ladder index, replication)``, so results do not depend on
the order or the process in which tasks run. Rows are assembled in
(ladder index, replication) order before anything is written.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .basis import BasisSpec, eval_basis_deriv
from .config import StudyConfig
from .errors import InputError, QSieveError, StudyError
from .mdp import atomic_write_text, sample_trajectories
from .npiv import (
    _family_min,
    bellman_residual_norms,
    choose_counts,
    fit_dataset,
    plugin_value,
    predict_q,
    select_multiplier,
)
from .numerics import tensor_gauss_rule, uniform_grid
from .oracle import StationaryLaw, policy_value
from .recipes import get_recipe

RESULT_SCHEMA = 1
MAX_FAILURE_FRACTION = 0.2
FD_STEP = 1e-5


def fit_loglog_slope(points):
    """OLS slope of ``log(err)`` on ``log(x)`` with its standard error.

    Parameters
    ----------
    points : sequence of (x, err)
        At least four points with ``x > 0`` and ``err > 0``.
    """
    pts = [(float(x), float(e)) for x, e in points]
    if len(pts) < 4:
        raise InputError(f"slope needs at least 4 points, got {len(pts)}")
    x = np.array([p[0] for p in pts])
    e = np.array([p[1] for p in pts])
    if np.any(~np.isfinite(e)) or np.any(e <= 0):
        raise InputError("errors must be positive and finite")
    if np.any(x <= 0):
        raise InputError("x values must be positive")
    lx, le = np.log(x), np.log(e)
    X = np.column_stack([np.ones_like(lx), lx])
    coef, *_ = np.linalg.lstsq(X, le, rcond=None)
    resid = le - X @ coef
    dof = len(pts) - 2
    sxx = float(np.sum((lx - lx.mean()) ** 2))
    if sxx == 0.0:
        raise InputError("x values must not all be equal")
    stderr = math.sqrt(float(resid @ resid) / dof / sxx)
    return float(coef[1]), stderr


def rate_axis(NT, j_rule):
    return NT / math.log(NT) if j_rule == "sup" else float(NT)


def fd_derivative(fn, X, alpha, h=FD_STEP):
    """Central finite-difference ``d^alpha fn`` at rows of ``X``."""
    alpha = list(alpha)
    for k, order in enumerate(alpha):
        if order:
            e = np.zeros(X.shape[1])
            e[k] = h
            rest = alpha.copy()
            rest[k] -= 1
            return (fd_derivative(fn, X + e, rest, h) - fd_derivative(fn, X - e, rest, h)) / (2 * h)
    return fn(X)


def task_seed(seed, ladder_index, replication):
    ss = np.random.SeedSequence(entropy=seed & 0xFFFFFFFFFFFFFFFF, spawn_key=(ladder_index, replication))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


@dataclass
class StudyContext:
    """Per-process state shared by all tasks of a study."""

    cfg: StudyConfig
    recipe: object
    l2_nodes: np.ndarray
    l2_weights: np.ndarray
    q_l2: np.ndarray
    sup_points: np.ndarray
    q_sup: np.ndarray
    dq_sup: dict
    dq_l2: dict
    v_true: float
    inset: tuple
    state_rule: object
    action_rule: object

    @classmethod
    def build(cls, cfg):
        recipe = get_recipe(cfg.recipe, gamma=cfg.gamma, noise_sd=cfg.noise_sd)
        mdp = recipe.mdp
        if not mdp.is_designed:
            raise InputError("rate studies need a recipe with a known Q-function")
        law = StationaryLaw(mdp, recipe.behavior)
        nodes, w = law.joint_rule(cfg.l2_nodes)
        w = w / w.sum()
        inset = error_inset(cfg, len(mdp.box))
        sup_points, _ = uniform_grid(mdp.box, cfg.sup_grid if len(mdp.box) <= 2 else 51, inset)
        ds = mdp.state_dim

        def qfun(X):
            return np.asarray(recipe.q_star(X[:, :ds], X[:, ds:]), dtype=float)

        dq_sup = {a: fd_derivative(qfun, sup_points, a) for a in cfg.alphas}
        dq_l2 = {a: fd_derivative(qfun, nodes, a) for a in cfg.alphas}
        state_rule = tensor_gauss_rule(mdp.state_box, 64)
        action_rule = tensor_gauss_rule(mdp.action_box, 48)
        v_true = policy_value(recipe.q_star, recipe.target, recipe.initial, state_rule, action_rule)
        return cls(cfg, recipe, nodes, w, qfun(nodes), sup_points, qfun(sup_points), dq_sup, dq_l2, v_true,
                   inset, state_rule, action_rule)


def error_inset(cfg, dim):
    """Per-dimension inset of the sup-error grid.

    A non-negative ``cfg.error_inset`` is used as is. Otherwise the inset is
    one knot span of the largest B-spline basis on the ladder, so the grid is
    fixed across the ladder and avoids the boundary spans.
    """
    if cfg.error_inset >= 0:
        return (cfg.error_inset,) * dim
    if cfg.psi_family != "bspline":
        return (0.0,) * dim
    mult = max(cfg.select_from) if cfg.multiplier == "select" else cfg.multiplier
    counts = choose_counts(max(cfg.ladder_NT), cfg.smoothness, dim, cfg.j_rule, mult,
                           _family_min("bspline", cfg.degree))
    recipe_box = get_recipe(cfg.recipe, gamma=cfg.gamma, noise_sd=cfg.noise_sd).mdp.box
    return tuple((hi - lo) / (m - cfg.degree) for m, (lo, hi) in zip(counts, recipe_box))


_CONTEXTS = {}


def _context(cfg):
    key = json.dumps(cfg.to_dict(), sort_keys=True)
    if key not in _CONTEXTS:
        _CONTEXTS.clear()
        _CONTEXTS[key] = StudyContext.build(cfg)
    return _CONTEXTS[key]


def alpha_label(alpha):
    return "d" + "".join(str(a) for a in alpha)


def run_task(cfg, ladder_index, replication):
    """One replication at one ladder point; failures are returned, not raised."""
    ctx = _context(cfg)
    recipe, mdp = ctx.recipe, ctx.recipe.mdp
    N, T = cfg.ladder_N[ladder_index], cfg.ladder_T[ladder_index]
    NT = N * T
    row = {"ladder_index": ladder_index, "replication": replication, "N": N, "T": T, "NT": NT}
    start = time.perf_counter()
    try:
        seed = task_seed(cfg.seed, ladder_index, replication)
        data = sample_trajectories(mdp, recipe.behavior, N, T, cfg.burn_in, seed)
        d = len(mdp.box)
        mult = cfg.multiplier
        if mult == "select":
            mult, _ = select_multiplier(data, cfg.psi_family, mdp.box, recipe.target, cfg.gamma, cfg.smoothness,
                                        cfg.j_rule, cfg.select_from, degree=cfg.degree)
        counts = choose_counts(NT, cfg.smoothness, d, cfg.j_rule, mult, _family_min(cfg.psi_family, cfg.degree))
        psi = BasisSpec(cfg.psi_family, counts, mdp.box, cfg.degree)
        b_counts = tuple(m + cfg.b_extra_per_dim for m in counts)
        b = BasisSpec(cfg.instrument_family, b_counts, mdp.box, cfg.degree)
        fit, _ = fit_dataset(data, psi, b, recipe.target, cfg.gamma)
        e_l2 = predict_q(fit, ctx.l2_nodes) - ctx.q_l2
        e_sup = predict_q(fit, ctx.sup_points) - ctx.q_sup
        row.update(
            seed=seed,
            multiplier=float(mult),
            J=psi.size,
            K=b.size,
            counts="x".join(str(m) for m in counts),
            l2_err=float(np.sqrt(ctx.l2_weights @ e_l2**2)),
            sup_err=float(np.max(np.abs(e_sup))),
        )
        for a in cfg.alphas:
            lab = alpha_label(a)
            ds_ = eval_basis_deriv(psi, ctx.sup_points, a) @ fit.coef - ctx.dq_sup[a]
            dl_ = eval_basis_deriv(psi, ctx.l2_nodes, a) @ fit.coef - ctx.dq_l2[a]
            row[f"{lab}_sup_err"] = float(np.max(np.abs(ds_)))
            row[f"{lab}_l2_err"] = float(np.sqrt(ctx.l2_weights @ dl_**2))
        bell = bellman_residual_norms(fit, mdp, recipe.target, ctx.sup_points, (ctx.l2_nodes, ctx.l2_weights),
                                      ctx.state_rule, ctx.action_rule)
        row["bellman_sup"] = bell["sup"]
        row["bellman_l2"] = bell["l2"]
        v_hat = plugin_value(fit, recipe.target, recipe.initial, ctx.state_rule, ctx.action_rule)
        row["value_err"] = float(v_hat - ctx.v_true)
        row["rank_deficient"] = bool(fit.diagnostics["rank_deficient_projected"] or fit.diagnostics["rank_deficient_B"])
        row["status"] = "ok"
        row["message"] = ""
    except (QSieveError, np.linalg.LinAlgError, FloatingPointError) as exc:
        row["status"] = "failed"
        row["message"] = f"{type(exc).__name__}: {exc}"
    row["wall_time"] = time.perf_counter() - start
    return row


def metric_names(cfg):
    names = ["l2_err", "sup_err"]
    for a in cfg.alphas:
        names += [f"{alpha_label(a)}_sup_err", f"{alpha_label(a)}_l2_err"]
    return names + ["bellman_sup", "bellman_l2"]


def csv_columns(cfg):
    return (["ladder_index", "replication", "N", "T", "NT", "seed", "multiplier", "J", "K", "counts"]
            + metric_names(cfg) + ["value_err", "rank_deficient", "status", "message"])


@dataclass
class RateStudyResult:
    config: StudyConfig
    rows: list
    aggregates: list = field(default_factory=list)
    slopes: dict = field(default_factory=dict)
    failures: int = 0

    @property
    def failure_fraction(self):
        return self.failures / max(len(self.rows), 1)

    def to_csv_text(self):
        cols = csv_columns(self.config)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for r in self.rows:
            writer.writerow([_fmt(r.get(c, "")) for c in cols])
        return buf.getvalue()

    def to_dict(self):
        return {
            "schema_version": RESULT_SCHEMA,
            "config": self.config.to_dict(),
            "rows": self.rows,
            "aggregates": self.aggregates,
            "slopes": self.slopes,
            "failures": self.failures,
            "failure_fraction": self.failure_fraction,
        }

    def write(self, csv_path=None, json_path=None):
        csv_path = csv_path or self.config.output_csv
        json_path = json_path or self.config.output_json
        if csv_path:
            atomic_write_text(csv_path, self.to_csv_text())
        if json_path:
            atomic_write_text(json_path, json.dumps(self.to_dict(), indent=2))


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def aggregate(cfg, rows):
    """Replication means per ladder point and log-log slopes of those means."""
    metrics = metric_names(cfg) + ["abs_value_err"]
    aggs = []
    for k, NT in enumerate(cfg.ladder_NT):
        ok = [r for r in rows if r["ladder_index"] == k and r["status"] == "ok"]
        entry = {"ladder_index": k, "NT": NT, "x": rate_axis(NT, cfg.j_rule), "replications_ok": len(ok)}
        if ok:
            entry["J"] = sorted({r["J"] for r in ok})
            for m in metrics:
                vals = [abs(r["value_err"]) if m == "abs_value_err" else r[m] for r in ok]
                entry[m] = float(np.mean(vals))
                entry[m + "_se"] = float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else None
        aggs.append(entry)
    slopes = {}
    complete = [a for a in aggs if a["replications_ok"] > 0]
    for m in metrics:
        pts = [(a["x"], a[m]) for a in complete]
        if len(pts) >= 4 and all(p[1] > 0 for p in pts):
            s, se = fit_loglog_slope(pts)
            slopes[m] = {"slope": s, "stderr": se, "x_axis": "NT/log(NT)" if cfg.j_rule == "sup" else "NT"}
        else:
            slopes[m] = None
    return aggs, slopes


def run_study(cfg, write=True):
    """Run every (ladder point, replication) task and aggregate.

    Raises :class:`StudyError` (after writing outputs) when more than 20% of
    the replications failed.
    """
    tasks = [(k, r) for k in range(len(cfg.ladder_NT)) for r in range(cfg.replications)]
    _context(cfg)  # fail fast on a bad recipe before spawning workers
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            rows = list(pool.map(run_task, [cfg] * len(tasks), [k for k, _ in tasks], [r for _, r in tasks]))
    else:
        rows = [run_task(cfg, k, r) for k, r in tasks]
    rows.sort(key=lambda r: (r["ladder_index"], r["replication"]))
    aggs, slopes = aggregate(cfg, rows)
    failures = sum(1 for r in rows if r["status"] != "ok")
    result = RateStudyResult(cfg, rows, aggs, slopes, failures)
    if write:
        result.write()
    if result.failure_fraction > MAX_FAILURE_FRACTION:
        raise StudyError(f"{failures} of {len(rows)} replications failed")
    return result
