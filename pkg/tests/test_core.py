import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mfsvie.core import (InvalidArgument, MSolutionGrid, PairKernel, PairMatrix, RegressionBasis, Regressor,
                         build_grid, complete_lower_triangle, discrete_m_norm, fd_jacobian, m_distance,
                         martingale_coefficients, pair_average, regress_conditional, sample_ensemble,
                         standard_error)


def test_grid_nodes():
    np.testing.assert_allclose(build_grid(1.0, 4).nodes, [0, 0.25, 0.5, 0.75, 1.0])
    np.testing.assert_allclose(build_grid(2.0, 1).nodes, [0, 2.0])


@pytest.mark.parametrize("T,N", [(1.0, 0), (0.0, 3), (-1.0, 3), (1.0, 2.5)])
def test_grid_rejects_bad_arguments(T, N):
    with pytest.raises(InvalidArgument):
        build_grid(T, N)


@given(st.floats(0.1, 10.0), st.integers(1, 200))
def test_grid_last_node_is_horizon(T, N):
    g = build_grid(T, N)
    assert g.nodes[-1] == T
    assert len(g.nodes) == N + 1
    assert np.all(np.diff(g.nodes) > 0)


def test_ensemble_deterministic():
    g = build_grid(1.0, 10)
    a, b = sample_ensemble(g, 50, 3), sample_ensemble(g, 50, 3)
    assert np.array_equal(a.dW, b.dW)
    assert not np.array_equal(a.dW, sample_ensemble(g, 50, 4).dW)


def test_ensemble_moments():
    g = build_grid(1.0, 100)
    e = sample_ensemble(g, 10_000, 0)
    col = e.dW[:, 0]
    assert abs(col.var(ddof=1) - 0.01) <= 0.05 * 0.01
    assert abs(col.mean()) <= 3 * np.sqrt(0.01 / 10_000)


def test_ensemble_rejects_bad_count():
    with pytest.raises(InvalidArgument):
        sample_ensemble(build_grid(1.0, 4), 0, 1)


def test_brownian_path_and_ito_sum():
    g = build_grid(1.0, 8)
    e = sample_ensemble(g, 5, 1)
    assert np.all(e.W[:, 0] == 0)
    np.testing.assert_allclose(e.W[:, -1], e.dW.sum(axis=1))
    np.testing.assert_allclose(e.ito_integral(np.ones((5, 8))), e.W)


def test_pair_average_constant_kernel():
    k = PairKernel(2, fn=lambda t, s, x, xp: np.broadcast_to([1.5, -2.0], np.broadcast_shapes(x.shape[:-1], xp.shape[:-1]) + (2,)))
    x = np.random.default_rng(0).normal(size=(7, 1))
    for mode in ("prime", "star"):
        np.testing.assert_allclose(pair_average(k, mode, 0, 0, x), np.tile([1.5, -2.0], (7, 1)))


def test_pair_average_second_slot_is_mean():
    k = PairKernel(1, fn=lambda t, s, x, xp: xp + 0 * x)
    x = np.arange(5.0)[:, None]
    np.testing.assert_allclose(pair_average(k, "prime", 0, 0, x), np.full((5, 1), 2.0))


def test_pair_average_two_particles_by_hand():
    x = np.array([[1.0], [3.0]])
    dense = PairKernel(1, fn=lambda t, s, a, b: a * b)
    sep = PairKernel(1, left=lambda t, s, a: a[..., None], right=lambda t, s, b: b)
    for k in (dense, sep):
        np.testing.assert_allclose(pair_average(k, "prime", 0, 0, x), [[2.0], [6.0]])
        np.testing.assert_allclose(pair_average(k, "star", 0, 0, x), [[2.0], [6.0]])


@given(st.lists(st.floats(-3, 3), min_size=2, max_size=12))
def test_pair_average_separable_matches_dense(vals):
    x = np.array(vals)[:, None]
    dense = PairKernel(1, fn=lambda t, s, a, b: np.sin(a) * (1 + b ** 2))
    sep = PairKernel(1, left=lambda t, s, a: np.sin(a)[..., None], right=lambda t, s, b: 1 + b ** 2)
    for mode in ("prime", "star"):
        np.testing.assert_allclose(pair_average(sep, mode, 0, 0, x), pair_average(dense, mode, 0, 0, x),
                                   atol=1e-12)


def test_pair_average_rejects_mode():
    with pytest.raises(InvalidArgument):
        pair_average(PairKernel(1, fn=lambda t, s, a, b: a), "both", 0, 0, np.zeros((2, 1)))


@given(st.integers(0, 2**31 - 1))
def test_pair_matrix_prime_and_star_are_adjoint(seed):
    rng = np.random.default_rng(seed)
    M, n, r = 6, 2, 3
    P = PairMatrix(rng.normal(size=(M, n, r)), rng.normal(size=(M, r, n)))
    X, Y = rng.normal(size=(M, n)), rng.normal(size=(M, n))
    # E[ <Y, E'[P X']> ] = E[ <E*[P^T Y], X> ]
    lhs = np.mean(np.sum(Y * P.apply_prime(X), axis=1))
    rhs = np.mean(np.sum(P.apply_star_transposed(Y) * X, axis=1))
    assert abs(lhs - rhs) < 1e-10
    dense = np.einsum("mar,krb->mkab", P.L, P.R)
    np.testing.assert_allclose(P.entry(2, 4), dense[2, 4])


def test_regression_constants_and_martingale(grid20, ens20):
    np.testing.assert_allclose(regress_conditional(np.full(ens20.M, 2.5), 7, ens20), 2.5, atol=1e-12)
    proj = regress_conditional(ens20.W[:, -1], 7, ens20, RegressionBasis(degree=1))
    assert np.max(np.abs(proj.ravel() - ens20.W[:, 7])) < 0.1
    sq = regress_conditional(ens20.W[:, 7] ** 2, 7, ens20, RegressionBasis(degree=2))
    np.testing.assert_allclose(sq.ravel(), ens20.W[:, 7] ** 2, atol=1e-9)


def test_regress_rejects_bad_node(ens20):
    with pytest.raises(InvalidArgument):
        regress_conditional(np.zeros(ens20.M), 99, ens20)


def test_martingale_coefficients(grid20, ens20):
    reg = Regressor(ens20, RegressionBasis(degree=2))
    Z, res = martingale_coefficients(ens20.W[:, 12], 12, reg)
    # E[dW^2 | F_j] = dt is only recovered up to regression noise
    # the sample mean of dW^2 / dt has standard error sqrt(2 / M)
    assert np.abs(Z.mean(axis=0) - 1.0).max() < 3 * np.sqrt(2 / ens20.M)
    assert np.mean(np.abs(Z - 1.0)) < 0.05
    Z, _ = martingale_coefficients(np.full(ens20.M, 3.0), 12, reg)
    np.testing.assert_allclose(Z, 0.0, atol=1e-10)
    S = ens20.ito_integral(np.broadcast_to(grid20.nodes[:-1], (ens20.M, grid20.N)))
    # the integral is not a function of W(t_j): condition on the Markov state (W, S)
    reg = Regressor(ens20, RegressionBasis("state", 2), np.stack([ens20.W, S], axis=2))
    Z, res = martingale_coefficients(S[:, 12], 12, reg)
    assert np.max(np.abs(Z.mean(axis=0) - grid20.nodes[:12])) < 0.05
    assert res < 1e-2


def test_complete_lower_triangle_matches_single_node(grid20, ens20):
    reg = Regressor(ens20, RegressionBasis(degree=2))
    Y = np.stack([ens20.W ** 2 - grid20.nodes], axis=2)
    Z = np.zeros((ens20.M, grid20.N + 1, grid20.N, 1))
    complete_lower_triangle(Y, Z, reg)
    Zi, _ = martingale_coefficients(Y[:, 9], 9, reg)
    np.testing.assert_allclose(Z[:, 9, :9], Zi, atol=1e-10)


def test_m_norm_trivial_cases():
    g = build_grid(2.0, 10)
    sol = MSolutionGrid.zeros(3, g, 1)
    assert discrete_m_norm(sol) == 0.0
    sol.Y[:] = 1.0
    assert discrete_m_norm(sol) == pytest.approx(2.0)


@given(st.floats(0.0, 3.0), st.integers(0, 9))
def test_m_norm_weight_is_exponential(beta, i):
    g = build_grid(1.0, 10)
    sol = MSolutionGrid.zeros(2, g, 1)
    sol.Y[:, i] = 1.0
    assert discrete_m_norm(sol, beta) == pytest.approx(np.exp(beta * g.nodes[i]) * g.dt)
    assert m_distance(sol, MSolutionGrid.zeros(2, g, 1), beta) == pytest.approx(discrete_m_norm(sol, beta))


def test_standard_error_and_jacobian():
    assert standard_error(np.array([1.0, 1.0, 1.0])) == 0.0
    J = fd_jacobian(lambda x: np.stack([x[:, 0] * x[:, 1], x[:, 0]], axis=1), [np.array([[2.0, 3.0]])], 0)
    np.testing.assert_allclose(J[0], [[3.0, 2.0], [1.0, 0.0]], atol=1e-6)
