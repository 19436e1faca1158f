import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qsieve.basis import BasisSpec, eval_basis, policy_basis
from qsieve.distributions import InitialDistribution, constant_point_policy
from qsieve.errors import CapabilityError, ConfigError, InputError
from qsieve.mdp import sample_trajectories
from qsieve.numerics import pinv_truncated, sym_inv_sqrt
from qsieve.npiv import (
    SieveFit,
    _per_trajectory_moments,
    solve_moments,
    assemble,
    balanced_counts,
    bellman_residual,
    bellman_residual_norms,
    bootstrap_coefficients,
    bootstrap_value_se,
    choose_J,
    fit_2sls,
    fit_dataset,
    j_rule_value,
    plugin_value,
    predict_q,
    predict_q_deriv,
    select_multiplier,
)
from qsieve.oracle import OracleQ, default_rules, mean_reward, oracle_value, transition_weights
from qsieve.recipes import benchmark, benchmark_q, in_span_coefficients

SQUARE = ((0.0, 1.0), (0.0, 1.0))


def spline(m, n=None):
    return BasisSpec("bspline", (m, n or m), SQUARE)


@pytest.fixture(scope="module")
def bench_data(bench):
    return sample_trajectories(bench.mdp, bench.behavior, 20, 100, seed=3)


# ---- assembly ------------------------------------------------------------------


def test_gamma_zero_gamma_matrix_is_psi(bench, bench_data):
    sys = assemble(bench_data, spline(5), spline(6), bench.target, 0.0)
    np.testing.assert_array_equal(sys.Gamma, sys.Psi)


def test_single_row_assembly(bench):
    d = sample_trajectories(bench.mdp, bench.behavior, 1, 1)
    sys = assemble(d, spline(4), spline(4), bench.target, 0.9)
    assert sys.Psi.shape == (1, 16) and sys.B.shape == (1, 16) and sys.G_pi.shape == (1, 16)
    with pytest.raises(InputError):
        fit_2sls(sys)


def test_dimension_checks(bench, bench_data):
    with pytest.raises(ConfigError):
        assemble(bench_data, spline(6), spline(5), bench.target, 0.9)
    with pytest.raises(ConfigError):
        assemble(bench_data, spline(4), spline(6), bench.target, 0.9)
    with pytest.raises(ConfigError):
        assemble(bench_data, spline(4), BasisSpec("bspline", (5, 5), ((0, 1), (0, 2))), bench.target, 0.9)
    with pytest.raises(InputError):
        assemble(bench_data, BasisSpec("bspline", (4, 4), ((0.2, 1.0), (0.0, 1.0))), spline(4), bench.target, 0.9)


def test_system_is_read_only(bench, bench_data):
    sys = assemble(bench_data, spline(4), spline(5), bench.target, 0.9)
    with pytest.raises(ValueError):
        sys.Psi[0, 0] = 1.0
    with pytest.raises(dataclasses.FrozenInstanceError):
        sys.gamma = 0.1


def test_cross_moments_match_population(bench, bench_law):
    """Sample B'Gamma/n against quadrature under the stationary law."""
    psi, b = spline(4), spline(5, 4)
    d = sample_trajectories(bench.mdp, bench.behavior, 100, 100, seed=21)
    sys = assemble(d, psi, b, bench.target, 0.9)
    per = np.einsum("nk,nj->nkj", sys.B, sys.Gamma).reshape(d.N, d.T, -1).mean(axis=1)
    est = per.mean(axis=0)
    se = per.std(axis=0, ddof=1) / math.sqrt(d.N)
    nodes, w = bench_law.joint_rule(40)
    sr, ar = default_rules(bench.mdp)
    Pn = transition_weights(bench.mdp, nodes[:, :1], nodes[:, 1:], sr) @ policy_basis(psi, bench.target, sr.nodes, ar)
    pop = (eval_basis(b, nodes).T * w) @ (eval_basis(psi, nodes) - 0.9 * Pn)
    z = np.abs(est - pop.ravel()) / se
    assert np.mean(z <= 3) >= 0.98
    assert z.max() <= 4.5


# ---- the estimator -------------------------------------------------------------


def test_gamma_zero_equals_ols(bench, bench_data):
    psi = spline(5)
    fit, sys = fit_dataset(bench_data, psi, psi, bench.target, 0.0)
    ols = np.linalg.lstsq(sys.Psi, sys.R, rcond=None)[0]
    assert np.max(np.abs(fit.coef - ols)) <= 1e-8


def test_noiseless_in_span_recovery(span_recipe):
    rec = span_recipe
    d = sample_trajectories(rec.mdp, rec.behavior, 20, 100, seed=0)
    psi = spline(4)
    fit, _ = fit_dataset(d, psi, spline(5), rec.target, rec.mdp.gamma)
    assert np.max(np.abs(fit.coef - in_span_coefficients())) <= 1e-8


def test_lstd_nesting(bench, bench_data):
    psi = spline(5)
    fit, sys = fit_dataset(bench_data, psi, psi, bench.target, 0.9)
    direct = np.linalg.solve(sys.Psi.T @ sys.Gamma, sys.Psi.T @ sys.R)
    assert np.max(np.abs(fit.coef - direct)) <= 1e-8


def test_normal_equations(bench, bench_data):
    fit, sys = fit_dataset(bench_data, spline(5), spline(7), bench.target, 0.9)
    B, G = sys.B, sys.Gamma
    grad = G.T @ B @ pinv_truncated(B.T @ B) @ B.T @ (sys.R - G @ fit.coef)
    assert np.max(np.abs(grad)) <= 1e-8 * np.linalg.norm(sys.R)
    assert fit.diagnostics["gradient_inf"] <= 1e-8 * fit.diagnostics["gradient_tolerance_scale"]


def test_gamma_derivative(bench, bench_data):
    """Central differences in gamma against the analytic derivative of the 2SLS map."""
    psi, b = spline(5), spline(6)
    g0, h = 0.8, 1e-6
    sys = assemble(bench_data, psi, b, bench.target, g0)
    n = sys.n
    W, _ = sym_inv_sqrt(sys.B.T @ sys.B / n)
    X = W @ sys.B.T @ sys.Gamma / n
    y = W @ sys.B.T @ sys.R / n
    D = W @ sys.B.T @ sys.G_pi / n
    c = np.linalg.solve(X.T @ X, X.T @ y)
    dc = np.linalg.solve(X.T @ X, -D.T @ (y - X @ c) + X.T @ D @ c)
    up = fit_2sls(dataclasses.replace(sys, gamma=g0 + h)).coef
    dn = fit_2sls(dataclasses.replace(sys, gamma=g0 - h)).coef
    fd = (up - dn) / (2 * h)
    assert np.max(np.abs(fd - dc)) <= 1e-4 * max(1.0, np.max(np.abs(dc)))


def _population_objective(rec, law, psi, b, coef_rows):
    nodes, w = law.joint_rule(40)
    sr, ar = default_rules(rec.mdp)
    g = rec.mdp.gamma
    Bn = eval_basis(b, nodes)
    Pn = transition_weights(rec.mdp, nodes[:, :1], nodes[:, 1:], sr) @ policy_basis(psi, rec.target, sr.nodes, ar)
    Sigma = (Bn.T * w) @ (eval_basis(psi, nodes) - g * Pn)
    m = (Bn.T * w) @ mean_reward(rec.mdp, nodes[:, :1], nodes[:, 1:])
    W, _ = sym_inv_sqrt((Bn.T * w) @ Bn)
    resid = (W @ (m[:, None] - Sigma @ coef_rows.T)).T
    return np.sum(resid**2, axis=1)


def test_more_data_lowers_population_objective(bench, bench_law):
    psi, b = spline(5), spline(6)
    means = []
    for N in (10, 40):
        coefs = []
        for r in range(50):
            d = sample_trajectories(bench.mdp, bench.behavior, N, 50, seed=1000 + r)
            coefs.append(fit_dataset(d, psi, b, bench.target, 0.9)[0].coef)
        means.append(_population_objective(bench, bench_law, psi, b, np.array(coefs)).mean())
    assert means[1] < means[0]


def test_rank_deficiency_reported(bench):
    d = sample_trajectories(bench.mdp, bench.behavior, 1, 40, seed=0)
    d.states[:] = 0.5
    d.actions[:] = 0.5
    fit, _ = fit_dataset(d, spline(4), spline(4), bench.target, 0.9)
    assert fit.diagnostics["rank_deficient_B"] and np.all(np.isfinite(fit.coef))


# ---- prediction ----------------------------------------------------------------


def _fit_with(coef, psi, gamma=0.9):
    return SieveFit(np.asarray(coef, dtype=float), psi, psi, gamma, 1e-10, {})


def test_predict_unit_coefficient(rng):
    psi = spline(4)
    X = rng.random((10, 2))
    np.testing.assert_array_equal(predict_q(_fit_with(np.eye(16)[0], psi), X), eval_basis(psi, X)[:, 0])


def test_predict_deriv(bench, bench_data, rng):
    fit, _ = fit_dataset(bench_data, spline(6), spline(7), bench.target, 0.9)
    X = rng.uniform(0.01, 0.99, (50, 2))
    np.testing.assert_array_equal(predict_q_deriv(fit, X, (0, 0)), predict_q(fit, X))
    h = 1e-5
    fd = (predict_q(fit, X + [h, 0]) - predict_q(fit, X - [h, 0])) / (2 * h)
    assert np.max(np.abs(predict_q_deriv(fit, X, (1, 0)) - fd)) <= 1e-6


def test_fit_is_immutable(bench, bench_data):
    fit, _ = fit_dataset(bench_data, spline(4), spline(5), bench.target, 0.9)
    with pytest.raises(ValueError):
        fit.coef[0] = 0.0
    with pytest.raises(dataclasses.FrozenInstanceError):
        fit.gamma = 0.5


def test_fit_json_roundtrip(bench, bench_data, tmp_path):
    fit, _ = fit_dataset(bench_data, spline(4), spline(5), bench.target, 0.9)
    back = SieveFit.from_json(fit.to_json())
    assert back.coef.tobytes() == fit.coef.tobytes()
    assert back.psi_spec == fit.psi_spec and back.b_spec == fit.b_spec and back.diagnostics == fit.diagnostics
    fit.save(tmp_path / "f.json")
    assert SieveFit.load(tmp_path / "f.json").coef.tobytes() == fit.coef.tobytes()
    with pytest.raises(InputError):
        SieveFit.from_json("{not json")
    with pytest.raises(InputError):
        SieveFit.from_json('{"coef": [1.0]}')


@settings(max_examples=25, deadline=None)
@given(coef=st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=16, max_size=16))
def test_fit_json_roundtrip_property(coef):
    fit = _fit_with(coef, spline(4))
    assert SieveFit.from_json(fit.to_json()).coef.tobytes() == fit.coef.tobytes()


# ---- Bellman residuals ---------------------------------------------------------


def test_in_span_residual_vanishes(span_recipe):
    fit = _fit_with(in_span_coefficients(), spline(4))
    norms = bellman_residual_norms(fit, span_recipe.mdp, span_recipe.target, grid=np.random.default_rng(0).random((400, 2)))
    assert norms["sup"] <= 1e-8 and norms["l2"] <= 1e-8


def test_residual_gamma_zero(rng):
    rec = benchmark(gamma=0.0)
    fit = _fit_with(rng.standard_normal(16), spline(4), 0.0)
    X = rng.random((30, 2))
    expect = mean_reward(rec.mdp, X[:, :1], X[:, 1:]) - predict_q(fit, X)
    np.testing.assert_allclose(bellman_residual(fit, rec.mdp, rec.target, X), expect, atol=1e-12)


def test_residual_controls_error(bench, bench_law, bench_data):
    """Weighted residual norm bounds the estimation error from below-scaled coverage."""
    fit, _ = fit_dataset(bench_data, spline(6), spline(8), bench.target, 0.9)
    nodes, w = bench_law.joint_rule(40)
    norms = bellman_residual_norms(fit, bench.mdp, bench.target, weighted=(nodes, w))
    err = math.sqrt(np.dot(w, (predict_q(fit, nodes) - benchmark_q(nodes[:, :1], nodes[:, 1:])) ** 2))
    cov = bench_law.coverage(bench.target)
    assert norms["l2"] >= (1 - 0.9) * math.sqrt(cov["p_min"] / cov["p_max"]) * err - 1e-6


# ---- values and bootstrap ------------------------------------------------------


def test_value_point_masses(rng):
    fit = _fit_with(rng.standard_normal(16), spline(4))
    v = plugin_value(fit, constant_point_policy(0.3, ((0.0, 1.0),)), InitialDistribution(((0.0, 1.0),), point=[0.8]))
    assert v == pytest.approx(float(predict_q(fit, [[0.8, 0.3]])[0]), abs=1e-14)


def test_value_zero_coefficients(bench):
    assert plugin_value(_fit_with(np.zeros(16), spline(4)), bench.target, bench.initial) == 0.0


def test_value_near_oracle(bench):
    d = sample_trajectories(bench.mdp, bench.behavior, 200, 100, seed=77)
    psi = spline(6)
    fit, sys = fit_dataset(d, psi, spline(7), bench.target, 0.9)
    v, se = bootstrap_value_se(sys, fit, bench.target, bench.initial, n_boot=100, seed=1)
    truth = oracle_value(OracleQ.from_function(benchmark_q, SQUARE, 201, 1), bench.target, bench.initial)
    assert se > 0
    assert abs(v - truth) <= 3 * se


def test_bootstrap_reproducible(bench, bench_data):
    fit, sys = fit_dataset(bench_data, spline(4), spline(5), bench.target, 0.9)
    a = bootstrap_coefficients(sys, 20, seed=3)
    b = bootstrap_coefficients(sys, 20, seed=3)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, bootstrap_coefficients(sys, 20, seed=4))


def test_per_trajectory_moments_rebuild_full_fit(bench, bench_data):
    fit, sys = fit_dataset(bench_data, spline(5), spline(6), bench.target, 0.9)
    BtB, BtG, BtR, rows = _per_trajectory_moments(sys)
    coef = solve_moments(BtB.sum(0), BtG.sum(0), BtR.sum(0), rows.sum())[0]
    assert np.max(np.abs(coef - fit.coef)) <= 1e-10


# ---- choosing J ----------------------------------------------------------------


def test_choose_J_examples():
    assert choose_J(10_000, 2, 2) == 25
    assert j_rule_value(10_000, 2, 2, multiplier=2) == pytest.approx(2 * j_rule_value(10_000, 2, 2))
    with pytest.raises(CapabilityError):
        choose_J(10_000, 1, 2, norm="sup")
    with pytest.raises(InputError):
        choose_J(10_000, 2, 2, norm="l1")


@settings(max_examples=100, deadline=None)
@given(target=st.integers(1, 5000), dim=st.integers(1, 4), mn=st.integers(1, 5))
def test_balanced_counts_minimal(target, dim, mn):
    counts = balanced_counts(target, dim, mn)
    assert max(counts) - min(counts) <= 1 and min(counts) >= mn
    assert math.prod(counts) >= target
    # removing one function from the largest side drops below the target, unless at the floor
    smaller = sorted(counts)
    smaller[-1] -= 1
    if smaller[-1] >= mn and max(smaller) - min(smaller) <= 1:
        assert math.prod(smaller) < target


@settings(max_examples=50, deadline=None)
@given(n1=st.integers(10, 10**6), n2=st.integers(10, 10**6))
def test_j_rule_monotone(n1, n2):
    lo, hi = sorted((n1, n2))
    assert choose_J(lo, 2, 2) <= choose_J(hi, 2, 2)
    assert choose_J(lo, 2, 2, "sup") <= choose_J(hi, 2, 2, "sup")


def test_select_multiplier(bench, bench_data):
    best, table = select_multiplier(bench_data, "bspline", SQUARE, bench.target, 0.9, p=2)
    assert best in (0.5, 1.0, 2.0)
    assert table[best][1] == min(v[1] for v in table.values())
