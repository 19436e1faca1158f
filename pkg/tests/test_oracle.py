import numpy as np
import pytest

from qsieve.distributions import InitialDistribution, constant_point_policy
from qsieve.errors import ConvergenceError, InputError
from qsieve.mdp import MdpSpec, designed_q_mdp
from qsieve.oracle import OracleQ, fixed_point_oracle, mean_reward, oracle_value
from qsieve.recipes import _target, _transition, benchmark_q

UNIT = ((0.0, 1.0),)


def _const_reward_mdp(gamma, value=1.0):
    f = lambda S, A, Sp: np.full(len(S), value)
    return MdpSpec(UNIT, UNIT, _transition(), lambda S, A, Sp, Z: f(S, A, Sp), f, gamma, 2.0 * value + 1.0)


def test_gamma_zero_returns_mean_reward():
    mdp = designed_q_mdp(benchmark_q, _transition(), _target(), 0.0, 0.3, UNIT)
    oq = fixed_point_oracle(mdp, _target(), grid_per_dim=21)
    assert oq.provenance["iterations"] == 1
    grid_s, grid_a = np.meshgrid(oq.axes[0], oq.axes[1], indexing="ij")
    np.testing.assert_allclose(oq.values.ravel(), benchmark_q(grid_s.reshape(-1, 1), grid_a.reshape(-1, 1)), atol=1e-14)


def test_constant_reward_geometric_sum():
    g = 0.9
    oq = fixed_point_oracle(_const_reward_mdp(g), _target(), grid_per_dim=21, tol=1e-10)
    assert np.max(np.abs(oq.values - 1.0 / (1.0 - g))) <= 1e-8


def test_designed_cross_check(bench):
    oq = fixed_point_oracle(bench.mdp, bench.target, grid_per_dim=61)
    X = np.random.default_rng(0).random((500, 2))
    assert np.max(np.abs(oq(X[:, :1], X[:, 1:]) - benchmark_q(X[:, :1], X[:, 1:]))) <= 5e-4


def test_residual_bound(bench):
    tol = 1e-8
    oq = fixed_point_oracle(bench.mdp, bench.target, grid_per_dim=31, tol=tol)
    g = bench.mdp.gamma
    assert oq.provenance["residual"] <= tol * (1 + g) / (1 - g)


def test_convergence_error_reports_residual(bench):
    with pytest.raises(ConvergenceError) as info:
        fixed_point_oracle(bench.mdp, bench.target, grid_per_dim=11, max_iter=3)
    assert info.value.iterations == 3 and info.value.residual > 0


def test_grid_too_small(bench):
    with pytest.raises(InputError):
        fixed_point_oracle(bench.mdp, bench.target, grid_per_dim=4)


def test_point_mass_target():
    pol = constant_point_policy(0.25, UNIT)
    mdp = designed_q_mdp(benchmark_q, _transition(), pol, 0.7, 0.0, UNIT)
    oq = fixed_point_oracle(mdp, pol, grid_per_dim=81)
    X = np.random.default_rng(1).random((200, 2))
    assert np.max(np.abs(oq(X[:, :1], X[:, 1:]) - benchmark_q(X[:, :1], X[:, 1:]))) <= 1e-4


def test_mean_reward_split_matches_generic_path(bench):
    X = np.random.default_rng(2).random((30, 2))
    fast = mean_reward(bench.mdp, X[:, :1], X[:, 1:])
    generic = MdpSpec(UNIT, UNIT, bench.mdp.transition, bench.mdp.reward_fn, bench.mdp.mean_reward_fn, 0.9, 10.0)
    np.testing.assert_allclose(fast, mean_reward(generic, X[:, :1], X[:, 1:]), atol=1e-12)


# ---- values --------------------------------------------------------------------


def test_value_point_masses():
    oq = OracleQ.from_function(benchmark_q, UNIT + UNIT, 41, 1)
    init = InitialDistribution(UNIT, point=[0.4])
    v = oracle_value(oq, constant_point_policy(0.6, UNIT), init)
    assert v == pytest.approx(float(oq(np.array([[0.4]]), np.array([[0.6]]))[0]), abs=1e-14)


def test_value_constant_q(bench):
    oq = OracleQ.from_function(lambda S, A: np.full(len(S), 3.5), UNIT + UNIT, 11, 1)
    assert oracle_value(oq, bench.target, bench.initial) == pytest.approx(3.5, abs=1e-12)


def test_value_matches_monte_carlo(bench):
    oq = OracleQ.from_function(benchmark_q, UNIT + UNIT, 201, 1)
    v = oracle_value(oq, bench.target, bench.initial)
    g = np.random.default_rng(8)
    n = 1_000_000
    S = g.random((n, 1))
    A = bench.target.sample(S, g.random((n, 1)))
    vals = benchmark_q(S, A)
    assert abs(vals.mean() - v) <= 3 * vals.std() / np.sqrt(n)


def test_oracle_save_load(tmp_path, bench):
    oq = fixed_point_oracle(bench.mdp, bench.target, grid_per_dim=11)
    oq.save(tmp_path / "q.npz")
    back = OracleQ.load(tmp_path / "q.npz")
    assert back.values.tobytes() == oq.values.tobytes()
    assert back.provenance == oq.provenance and back.order == oq.order


def test_designed_provenance_exact_at_nodes():
    oq = OracleQ.from_function(benchmark_q, UNIT + UNIT, 11, 1)
    S, A = np.meshgrid(oq.axes[0], oq.axes[1], indexing="ij")
    got = oq(S.reshape(-1, 1), A.reshape(-1, 1))
    np.testing.assert_allclose(got, benchmark_q(S.reshape(-1, 1), A.reshape(-1, 1)), atol=1e-13)
    with pytest.raises(InputError):
        oq(np.array([[1.5]]), np.array([[0.5]]))
