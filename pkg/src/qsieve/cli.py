"""Command line interface.

Exit status: 0 on success, 1 for input or configuration errors (including
usage errors), 2 for numerical failures.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__
from .basis import BasisSpec
from .config import FitConfig, StudyConfig
from .diagnostics import check_ej_bound, compute_report
from .distributions import InitialDistribution, constant_point_policy
from .errors import ConfigError, GenerationError, InputError, NumericalError, QSieveError
from .mdp import Dataset, atomic_write_text, sample_trajectories
from .npiv import (
    SieveFit,
    _family_min,
    assemble,
    bootstrap_value_se,
    choose_counts,
    fit_2sls,
    plugin_value,
)
from .numerics import uniform_grid
from .oracle import OracleQ, fixed_point_oracle
from .recipes import RECIPES, get_recipe

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise InputError(f"expected comma-separated integers, got {text!r}") from None


def _point(text, box, what):
    x = _floats(text)
    if len(x) != len(box):
        raise InputError(f"{what} point needs {len(box)} coordinate(s), got {text!r}")
    for v, (lo, hi) in zip(x, box):
        if not lo <= v <= hi:
            raise InputError(f"{what} point {x} lies outside {list(box)}")
    return x


def _recipe(args):
    return get_recipe(args.recipe, gamma=args.gamma, noise_sd=args.noise_sd)


def _target(spec, recipe):
    if spec in (None, "recipe"):
        return recipe.target
    if spec.startswith("point:"):
        box = recipe.mdp.action_box
        return constant_point_policy(_point(spec[6:], box, "action"), box)
    raise InputError(f"target must be 'recipe' or 'point:a1,...', got {spec!r}")


def _initial(spec, recipe):
    if spec in (None, "recipe"):
        return recipe.initial
    if spec == "uniform":
        return InitialDistribution.uniform(recipe.mdp.state_box)
    if spec.startswith("point:"):
        box = recipe.mdp.state_box
        return InitialDistribution(box, point=_point(spec[6:], box, "state"))
    raise InputError(f"initial law must be 'recipe', 'uniform' or 'point:s1,...', got {spec!r}")


def _load_dataset(path):
    try:
        return Dataset.load(path) if str(path).endswith(".npz") else Dataset.from_csv(path)
    except FileNotFoundError:
        raise InputError(f"dataset not found: {path}") from None
    except ValueError as exc:
        if isinstance(exc, QSieveError):
            raise
        raise InputError(f"{path}: cannot parse dataset: {exc}") from None


def cmd_simulate(args):
    recipe = _recipe(args)
    data = sample_trajectories(recipe.mdp, recipe.behavior, args.N, args.T, args.burn_in, args.seed)
    if args.out.endswith(".npz"):
        data.save(args.out)
    else:
        data.to_csv(args.out)
    print(f"wrote {data.size} transitions ({data.N} x {data.T}) to {args.out}")


def cmd_oracle(args):
    recipe = _recipe(args)
    mdp = recipe.mdp
    if args.method == "designed":
        oq = OracleQ.from_function(recipe.q_star, mdp.box, args.grid, mdp.state_dim)
    else:
        oq = fixed_point_oracle(mdp, recipe.target, args.grid, tol=args.tol, max_iter=args.max_iter)
    oq.save(args.out)
    print(json.dumps(oq.provenance))
    if mdp.is_designed:
        g, _ = uniform_grid(mdp.box, args.grid)
        ds = mdp.state_dim
        dev = float(np.max(np.abs(oq.values.ravel() - recipe.q_star(g[:, :ds], g[:, ds:]))))
        print(f"max |oracle - Q*| on grid: {dev:.3e}")


def _fit_settings(args):
    cfg = FitConfig.load(args.config) if args.config else FitConfig()
    merged = {k: getattr(cfg, k) for k in FitConfig.TYPES}
    for key in ("recipe", "gamma", "noise_sd", "psi_family", "b_family", "degree", "j_rule", "multiplier",
                "smoothness", "rtol"):
        val = getattr(args, key, None)
        if val is not None:
            merged[key] = val
    if args.counts:
        merged["counts"] = _ints(args.counts)
    if args.b_counts:
        merged["b_counts"] = _ints(args.b_counts)
    return merged


def cmd_fit(args):
    s = _fit_settings(args)
    recipe = get_recipe(s["recipe"], gamma=s["gamma"], noise_sd=s["noise_sd"])
    data = _load_dataset(args.data)
    box = recipe.mdp.box
    if s["counts"]:
        counts = tuple(s["counts"])
    else:
        counts = choose_counts(data.size, s["smoothness"], len(box), s["j_rule"], s["multiplier"],
                               _family_min(s["psi_family"], s["degree"]))
    psi = BasisSpec(s["psi_family"], counts, box, s["degree"])
    b = BasisSpec(s["b_family"] or s["psi_family"], tuple(s["b_counts"]) or counts, box, s["degree"])
    target = _target(args.target, recipe)
    fit = fit_2sls(assemble(data, psi, b, target, s["gamma"]), s["rtol"])
    fit.save(args.out)
    d = fit.diagnostics
    print(f"J={psi.size} K={b.size} rank(B'B)={d['rank_BtB']} rank(projected)={d['rank_projected']} "
          f"cond(projected)={d['cond_projected']:.3e}")
    print(f"wrote {args.out}")


def cmd_value(args):
    try:
        fit = SieveFit.load(args.fit)
    except FileNotFoundError:
        raise InputError(f"fit file not found: {args.fit}") from None
    recipe = _recipe(args)
    target = _target(args.target, recipe)
    initial = _initial(args.initial, recipe)
    if args.data:
        sys_ = assemble(_load_dataset(args.data), fit.psi_spec, fit.b_spec, target, fit.gamma)
        v, se = bootstrap_value_se(sys_, fit, target, initial, args.n_boot, args.seed)
        print(f"value {v!r}")
        print(f"bootstrap_se {se!r}")
    else:
        print(f"value {plugin_value(fit, target, initial)!r}")


def cmd_diagnose(args):
    recipe = _recipe(args)
    mdp = recipe.mdp
    psi = BasisSpec(args.family, _ints(args.counts), mdp.box, args.degree)
    b = BasisSpec(args.b_family or args.family, _ints(args.b_counts) if args.b_counts else psi.per_dim_count,
                  mdp.box, args.degree)
    rep = compute_report(mdp, recipe.target, psi, b, mdp.gamma, args.mc_points, recipe.behavior, seed=args.seed,
                         method=args.method)
    ej = check_ej_bound(rep)
    rows = [
        ("J", rep.J), ("K", rep.K), ("e_J", rep.e_J), ("omega_J", rep.omega_J), ("s_JK", rep.s_JK),
        ("tau_J", rep.tau_J_estimate), ("zeta_b", rep.zeta_b), ("zeta_kappa", rep.zeta_kappa),
        ("xi_psi", rep.xi_psi), ("p_min (grid est.)", rep.p_min), ("p_max (grid est.)", rep.p_max),
        ("tau bound", rep.theorem1_bound), ("e_J floor", ej["floor"]), ("e_J floor margin", ej["margin"]),
    ]
    for name, val in rows:
        print(f"{name:<20} {val:>14.6g}" if isinstance(val, float) else f"{name:<20} {val:>14}")
    for flag in rep.flags:
        print(f"flag: {flag}")
    if args.out:
        doc = rep.to_dict()
        doc["ej_check"] = ej
        atomic_write_text(args.out, json.dumps(doc, indent=2))
        print(f"wrote {args.out}")


def cmd_rate_study(args):
    from .harness import run_study

    cfg = StudyConfig.load(args.config)
    changes = {}
    if args.workers is not None:
        changes["workers"] = args.workers
    if args.out_csv:
        changes["output_csv"] = args.out_csv
    if args.out_json:
        changes["output_json"] = args.out_json
    if changes:
        cfg = cfg.replace(**changes)
    res = run_study(cfg)
    print(f"{'NT':>8} {'J':>8} {'ok':>4} {'l2_err':>12} {'sup_err':>12}")
    for a in res.aggregates:
        if a["replications_ok"]:
            print(f"{a['NT']:>8} {','.join(map(str, a['J'])):>8} {a['replications_ok']:>4} "
                  f"{a['l2_err']:>12.5g} {a['sup_err']:>12.5g}")
    for name, s in res.slopes.items():
        if s is not None:
            print(f"slope {name:<16} {s['slope']:+.4f} (se {s['stderr']:.4f}, x = {s['x_axis']})")
    print(f"wrote {cfg.output_csv} and {cfg.output_json}")


def _add_recipe(p):
    p.add_argument("--recipe", default="benchmark", choices=sorted(RECIPES))
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--noise-sd", type=float, default=0.5)


def build_parser():
    parser = _Parser(prog="qsieve", description="Sieve 2SLS estimation of Q-functions for off-policy evaluation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a batch dataset under the behaviour policy")
    _add_recipe(p)
    p.add_argument("--N", type=int, required=True, help="number of trajectories")
    p.add_argument("--T", type=int, required=True, help="transitions per trajectory")
    p.add_argument("--burn-in", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output .csv or .npz")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("oracle", help="compute the true Q-function on a grid")
    _add_recipe(p)
    p.add_argument("--grid", type=int, default=201, help="points per dimension")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=100000)
    p.add_argument("--method", choices=["fixed-point", "designed"], default="fixed-point")
    p.add_argument("--out", required=True, help="output .npz")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("fit", help="fit the sieve 2SLS estimator to a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="TOML fit configuration; flags override it")
    p.add_argument("--recipe", choices=sorted(RECIPES))
    p.add_argument("--gamma", type=float)
    p.add_argument("--noise-sd", dest="noise_sd", type=float)
    p.add_argument("--family", dest="psi_family", choices=["bspline", "cosine", "legendre"])
    p.add_argument("--b-family", dest="b_family", choices=["bspline", "cosine", "legendre"])
    p.add_argument("--degree", type=int)
    p.add_argument("--counts", help="per-dimension basis counts, e.g. 5,5 (default: J rule)")
    p.add_argument("--b-counts", help="per-dimension instrument counts (default: same as --counts)")
    p.add_argument("--j-rule", dest="j_rule", choices=["l2", "sup"])
    p.add_argument("--multiplier", type=float)
    p.add_argument("--smoothness", type=float)
    p.add_argument("--rtol", type=float)
    p.add_argument("--target", default="recipe", help="'recipe' or 'point:a1,...'")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("diagnose", help="ill-posedness report for a basis pair")
    _add_recipe(p)
    p.add_argument("--family", default="bspline", choices=["bspline", "cosine", "legendre"])
    p.add_argument("--b-family", choices=["bspline", "cosine", "legendre"])
    p.add_argument("--degree", type=int, default=3)
    p.add_argument("--counts", default="5,5")
    p.add_argument("--b-counts")
    p.add_argument("--mc-points", type=int, default=20000)
    p.add_argument("--method", choices=["mc", "quadrature"], default="mc")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("rate-study", help="run a convergence-rate study from a TOML config")
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=int)
    p.add_argument("--out-csv")
    p.add_argument("--out-json")
    p.set_defaults(func=cmd_rate_study)

    p = sub.add_parser("value", help="plug-in value of a fitted Q-function")
    _add_recipe(p)
    p.add_argument("--fit", required=True)
    p.add_argument("--target", default="recipe", help="'recipe' or 'point:a1,...'")
    p.add_argument("--initial", default="recipe", help="'recipe', 'uniform' or 'point:s1,...'")
    p.add_argument("--data", help="dataset for a trajectory-bootstrap standard error")
    p.add_argument("--n-boot", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_value)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_INPUT
    try:
        args.func(args)
    except (InputError, ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalError, GenerationError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
