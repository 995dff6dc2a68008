import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mfsvie.comparison import DEFAULT_C
from mfsvie.core import DivergedSimulation, InvalidArgument, PairKernel, PairMatrix, build_grid, sample_ensemble
from mfsvie.forward import (ForwardProblem, LinearForwardCoeffs, closed_form_example_5_2, closed_form_example_5_4,
                            example_5_2_problem, example_5_4, linear_as_problem, solve_linear_fsvie, solve_mf_fsvie)


def test_no_dynamics_returns_free_term(grid20, ens20):
    p = ForwardProblem(2, lambda i: [1.0, -grid20.nodes[i]])
    X = solve_mf_fsvie(p, grid20, ens20).X
    np.testing.assert_array_equal(X[:, :, 1], np.broadcast_to(-grid20.nodes, (ens20.M, 21)))
    assert np.all(X[:, :, 0] == 1.0)


def test_example_5_2_mean_and_path(grid20, ens20):
    sol = solve_mf_fsvie(example_5_2_problem(), grid20, ens20)
    assert np.all(np.abs(sol.mean[:, 0] - 1.0) <= 3 * sol.se[:, 0] + 1e-14)
    exact = closed_form_example_5_2(grid20, ens20)
    assert np.all(exact.X[:, 0] == 1.0)
    err = np.abs(sol.X - exact.X).max(axis=(0, 2))
    assert np.all(err <= 3 * (sol.se[:, 0] + DEFAULT_C * grid20.dt))


def test_example_5_4_closed_form_b_one():
    g = build_grid(1.0, 100)
    e = sample_ensemble(g, 3, 0)
    XT = solve_mf_fsvie(example_5_4(1.0, 0.0, g), g, e).X[0, -1, 0]
    assert abs(XT - 1.0) <= 0.5 * g.dt  # e T + (1 - e) = 1
    exact = closed_form_example_5_4(1.0, 0.0, g, e).X[0, -1, 0]
    assert exact == pytest.approx(1.0)


def test_example_5_4_closed_form_cases():
    g = build_grid(1.0, 10)
    e = sample_ensemble(g, 2, 0)
    np.testing.assert_allclose(closed_form_example_5_4(0.0, 0.0, g, e).X[0, :, 0], 1.0 - g.nodes)
    assert closed_form_example_5_4(-1.0, 0.0, g, e).X[0, -1, 0] < 0
    b = 0.7
    np.testing.assert_allclose(closed_form_example_5_4(b, 0.0, g, e).X[0, :, 0],
                               np.exp(b * g.nodes) + (1 - np.exp(b * g.nodes)) / b)


def test_linear_zero_coefficients(grid20, ens20):
    X = solve_linear_fsvie(LinearForwardCoeffs(1), lambda i: 2.0, grid20, ens20).X
    assert np.all(X == 2.0)


def test_linear_constant_drift_is_exponential():
    g = build_grid(1.0, 200)
    e = sample_ensemble(g, 2, 0)
    a = 0.8
    X = solve_linear_fsvie(LinearForwardCoeffs(1, A0=lambda i, j: a), lambda i: 1.0, g, e).X[0, :, 0]
    assert np.max(np.abs(X - np.exp(a * g.nodes))) <= DEFAULT_C * g.dt


def _random_linear(seed, n=2):
    rng = np.random.default_rng(seed)
    A0, A1, C0, C1 = (rng.uniform(-0.5, 0.5, (n, n)) for _ in range(4))
    return LinearForwardCoeffs(n, A0=lambda i, j: A0 * (1 + 0.1 * i), A1=lambda i, j: A1,
                               C0=lambda i, j: PairMatrix.constant(C0), C1=lambda i, j: PairMatrix.constant(C1))


@given(st.integers(0, 10_000))
def test_linear_and_generic_paths_agree(seed):
    g = build_grid(1.0, 8)
    e = sample_ensemble(g, 30, seed)
    c = _random_linear(seed)
    phi = lambda i: np.array([1.0, g.nodes[i]])  # noqa: E731
    a = solve_linear_fsvie(c, phi, g, e).X
    b = solve_mf_fsvie(linear_as_problem(c, phi, g), g, e).X
    assert np.max(np.abs(a - b)) < 1e-12


def test_mean_field_average_uses_all_particles():
    # X = 1 + int E'[x'] ds with phi = m-dependent start: the mean grows like e^t
    g = build_grid(1.0, 100)
    e = sample_ensemble(g, 4, 0)
    k = PairKernel(1, left=lambda t, s, x: np.ones(x.shape[:-1] + (1, 1)), right=lambda t, s, xp: xp)
    start = np.array([[0.0], [1.0], [2.0], [1.0]])
    p = ForwardProblem(1, lambda i: start, b=lambda t, s, x, gam: gam, theta_b=k)
    X = solve_mf_fsvie(p, g, e).X
    # mean satisfies m(t) = 1 + int m ds
    assert abs(X[:, -1, 0].mean() - np.e) < DEFAULT_C * g.dt
    np.testing.assert_allclose(X[:, -1, 0] - X[:, -1, 0].mean(), start[:, 0] - 1.0, atol=1e-12)


def test_divergence_is_reported():
    g = build_grid(1.0, 20)
    e = sample_ensemble(g, 2, 0)
    p = ForwardProblem(1, lambda i: 1.0, b=lambda t, s, x, gam: 1e80 * x ** 3)
    with pytest.raises(DivergedSimulation) as info:
        solve_mf_fsvie(p, g, e)
    assert info.value.node is not None


def test_ensemble_grid_mismatch():
    g = build_grid(1.0, 20)
    e = sample_ensemble(build_grid(1.0, 10), 2, 0)
    with pytest.raises(InvalidArgument):
        solve_mf_fsvie(example_5_2_problem(), g, e)


def test_particle_relabelling_permutes_paths(grid20):
    e = sample_ensemble(grid20, 50, 3)
    perm = np.random.default_rng(1).permutation(50)
    a = solve_mf_fsvie(example_5_2_problem(), grid20, e).X
    b = solve_mf_fsvie(example_5_2_problem(), grid20, e.permuted(perm)).X
    np.testing.assert_allclose(b, a[perm], atol=1e-12)
