import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qsieve.basis import (
    BasisSpec,
    RankDeficiencyWarning,
    eval_basis,
    eval_basis_deriv,
    flat_index,
    gram_matrix,
    multi_index,
    policy_basis,
)
from qsieve.distributions import (
    PolicyDensity,
    TruncatedGaussianPolicy,
    UniformPolicy,
    check_normalization,
    constant_point_policy,
)
from qsieve.errors import CapabilityError, InputError
from qsieve.numerics import tensor_gauss_rule

UNIT = ((0.0, 1.0),)
SQUARE = ((0.0, 1.0), (0.0, 1.0))


def test_cosine_values_at_zero():
    out = eval_basis(BasisSpec("cosine", (2,), UNIT), [[0.0]])
    np.testing.assert_allclose(out, [[1.0, np.sqrt(2.0)]], atol=1e-15)


def test_legendre_values_at_midpoint():
    out = eval_basis(BasisSpec("legendre", (2,), UNIT), [[0.5]])
    np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(
    x=st.lists(st.floats(0.0, 1.0), min_size=1, max_size=20),
    m=st.integers(4, 15),
    degree=st.integers(1, 3),
)
def test_bspline_partition_of_unity(x, m, degree):
    m = max(m, degree + 1)
    out = eval_basis(BasisSpec("bspline", (m,), UNIT, degree), np.array(x)[:, None])
    assert np.max(np.abs(out.sum(axis=1) - 1.0)) <= 1e-12
    assert out.min() >= -1e-15


def test_tensor_ordering_last_dimension_fastest():
    spec = BasisSpec("legendre", (2, 3), SQUARE)
    pt = np.array([[0.3, 0.8]])
    full = eval_basis(spec, pt)[0]
    f0 = eval_basis(BasisSpec("legendre", (2,), UNIT), [[0.3]])[0]
    f1 = eval_basis(BasisSpec("legendre", (3,), UNIT), [[0.8]])[0]
    for j in range(6):
        i0, i1 = multi_index(spec, j)
        assert full[j] == pytest.approx(f0[i0] * f1[i1], abs=1e-15)


def test_out_of_domain_names_point():
    spec = BasisSpec("bspline", (5, 5), SQUARE)
    with pytest.raises(InputError, match="1.5"):
        eval_basis(spec, [[0.2, 0.3], [1.5, 0.1]])


def test_invalid_specs():
    with pytest.raises(InputError):
        BasisSpec("fourier", (3,), UNIT)
    with pytest.raises(InputError):
        BasisSpec("bspline", (3,), UNIT, 3)
    with pytest.raises(InputError):
        BasisSpec("cosine", (3,), ((1.0, 1.0),))
    with pytest.raises(InputError):
        BasisSpec("cosine", (3, 3), UNIT)
    with pytest.raises(CapabilityError):
        BasisSpec("cosine", (2,) * 7, UNIT * 7)


def test_spec_roundtrip():
    spec = BasisSpec("bspline", (6, 5), ((0.0, 2.0), (-1.0, 1.0)), 2)
    assert BasisSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(InputError):
        BasisSpec.from_dict({"family": "cosine"})


@settings(max_examples=50, deadline=None)
@given(counts=st.lists(st.integers(1, 6), min_size=1, max_size=4), data=st.data())
def test_flat_multi_index_roundtrip(counts, data):
    spec = BasisSpec("cosine", tuple(counts), UNIT * len(counts))
    j = data.draw(st.integers(0, spec.size - 1))
    assert flat_index(spec, multi_index(spec, j)) == j


# ---- derivatives ---------------------------------------------------------------


def test_zero_derivative_is_evaluation(rng):
    spec = BasisSpec("bspline", (6, 5), SQUARE)
    X = rng.random((30, 2))
    np.testing.assert_array_equal(eval_basis_deriv(spec, X, (0, 0)), eval_basis(spec, X))


def test_cosine_first_derivative_at_zero():
    out = eval_basis_deriv(BasisSpec("cosine", (2,), UNIT), [[0.0]], (1,))
    np.testing.assert_allclose(out, [[0.0, 0.0]], atol=1e-14)


def test_bspline_derivative_matches_finite_difference(rng):
    spec = BasisSpec("bspline", (10,), UNIT)
    x = rng.uniform(0.01, 0.99, 50)[:, None]
    h = 1e-5
    fd = (eval_basis(spec, x + h) - eval_basis(spec, x - h)) / (2 * h)
    assert np.max(np.abs(eval_basis_deriv(spec, x, (1,)) - fd)) <= 1e-6


@settings(max_examples=40, deadline=None)
@given(
    family=st.sampled_from(["bspline", "cosine", "legendre"]),
    alpha=st.sampled_from([(1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]),
    seed=st.integers(0, 2**32 - 1),
)
def test_derivatives_match_finite_differences(family, alpha, seed):
    spec = BasisSpec(family, (5, 4), SQUARE)
    X = np.random.default_rng(seed).uniform(0.02, 0.98, (10, 2))
    h = 1e-5
    # step along the first non-zero axis, differencing the lower-order analytic derivative
    k = 0 if alpha[0] else 1
    lower = list(alpha)
    lower[k] -= 1
    e = np.zeros(2)
    e[k] = h
    fd = (eval_basis_deriv(spec, X + e, lower) - eval_basis_deriv(spec, X - e, lower)) / (2 * h)
    assert np.max(np.abs(eval_basis_deriv(spec, X, alpha) - fd)) <= 1e-6


def test_bspline_derivative_order_capability():
    spec = BasisSpec("bspline", (6,), UNIT, 2)
    with pytest.raises(CapabilityError):
        eval_basis_deriv(spec, [[0.5]], (2,))
    with pytest.raises(InputError):
        eval_basis_deriv(spec, [[0.5]], (-1,))


# ---- policy averages -----------------------------------------------------------


def test_policy_basis_point_mass():
    spec = BasisSpec("bspline", (5, 5), SQUARE)
    S = np.array([[0.1], [0.7]])
    pol = constant_point_policy(0.4, ((0.0, 1.0),))
    np.testing.assert_array_equal(policy_basis(spec, pol, S), eval_basis(spec, [[0.1, 0.4], [0.7, 0.4]]))


def test_policy_basis_uniform_kills_nonconstant_cosines():
    spec = BasisSpec("cosine", (3, 4), SQUARE)
    S = np.linspace(0, 1, 7)[:, None]
    rule = tensor_gauss_rule(((0.0, 1.0),), 32)
    out = policy_basis(spec, UniformPolicy(((0.0, 1.0),)), S, rule)
    state = eval_basis(BasisSpec("cosine", (3,), UNIT), S)
    for j in range(spec.size):
        i_s, i_a = multi_index(spec, j)
        expect = state[:, i_s] if i_a == 0 else 0.0
        np.testing.assert_allclose(out[:, j], expect, atol=1e-13)


def test_policy_basis_matches_monte_carlo(bench):
    spec = BasisSpec("bspline", (5, 5), SQUARE)
    pol = bench.target
    S = np.array([[0.2], [0.8]])
    rule = tensor_gauss_rule(((0.0, 1.0),), 48)
    exact = policy_basis(spec, pol, S, rule)
    g = np.random.default_rng(3)
    n = 1_000_000
    for i in range(2):
        A = pol.sample(np.repeat(S[i : i + 1], n, axis=0), g.random((n, 1)))
        vals = eval_basis(spec, np.hstack([np.full((n, 1), S[i, 0]), A]))
        se = vals.std(axis=0) / np.sqrt(n)
        assert np.all(np.abs(vals.mean(axis=0) - exact[i]) <= 3 * se + 1e-12)


class _NegativePolicy(PolicyDensity):
    def density_matrix(self, S, A_nodes):
        return np.full((len(S), len(A_nodes)), -1.0)


def test_policy_basis_rejects_negative_density():
    spec = BasisSpec("cosine", (2, 2), SQUARE)
    with pytest.raises(InputError, match="negative"):
        policy_basis(spec, _NegativePolicy(((0.0, 1.0),)), [[0.5]], tensor_gauss_rule(((0.0, 1.0),), 4))


def test_policy_normalization_check():
    good = TruncatedGaussianPolicy(lambda S: 0.3 + 0.4 * S, 0.2, ((0.0, 1.0),))
    assert check_normalization(good, ((0.0, 1.0),)) <= 1e-6

    class Half(UniformPolicy):
        def density_matrix(self, S, A_nodes):
            return 0.5 * super().density_matrix(S, A_nodes)

    with pytest.raises(InputError):
        check_normalization(Half(((0.0, 1.0),)), ((0.0, 1.0),))


# ---- Gram matrices --------------------------------------------------------------


def test_cosine_gram_near_identity():
    x = (np.arange(100_000) + 0.5) / 100_000
    G = gram_matrix(BasisSpec("cosine", (6,), UNIT), x[:, None])
    assert np.max(np.abs(G - np.eye(6))) <= 1e-3


def test_gram_single_point_rank_one():
    spec = BasisSpec("legendre", (3, 3), SQUARE)
    with pytest.warns(RankDeficiencyWarning):
        G = gram_matrix(spec, np.tile([[0.3, 0.6]], (5, 1)))
    assert np.linalg.matrix_rank(G) == 1


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 60), family=st.sampled_from(["bspline", "cosine", "legendre"]))
def test_gram_symmetric_psd(seed, n, family):
    spec = BasisSpec(family, (4, 4), SQUARE)
    X = np.random.default_rng(seed).random((n, 2))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RankDeficiencyWarning)
        G = gram_matrix(spec, X)
    assert np.array_equal(G, G.T)
    assert np.linalg.eigvalsh(G).min() >= -1e-12 * max(1.0, np.abs(G).max())
