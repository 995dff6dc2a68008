import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mfsvie.backward import (BackwardProblem, LinearBackwardCoeffs, PicardReport, closed_form_example_3_3,
                             closed_form_example_5_10, deterministic_volterra_solve, example_3_3, example_5_10,
                             linear_backward_as_problem, solve_inner_bsvie, solve_linear_bsvie,
                             solve_mf_bsvie_picard, verify_m_condition)
from mfsvie.builtins import CONDITIONAL_EXPECTATION_BASIS, conditional_expectation_problem
from mfsvie.comparison import DEFAULT_C
from mfsvie.core import (InvalidArgument, MSolutionGrid, PairMatrix, RegressionBasis, Regressor, build_grid,
                         m_distance, sample_ensemble)


@pytest.fixture(scope="module")
def small():
    g = build_grid(1.0, 10)
    return g, sample_ensemble(g, 3000, 5)


def test_inner_constant_free_term(small):
    g, e = small
    p = BackwardProblem(1, lambda i: 2.0, g=None)
    sol = solve_inner_bsvie(MSolutionGrid.zeros(e.M, g, 1), p, g, e, RegressionBasis(degree=2))
    np.testing.assert_allclose(sol.Y, 2.0, atol=1e-10)
    np.testing.assert_allclose(sol.Z, 0.0, atol=1e-10)


def test_inner_terminal_brownian(small):
    g, e = small
    WT = e.W[:, -1:]
    p = BackwardProblem(1, lambda i: WT, g=None)
    sol = solve_inner_bsvie(MSolutionGrid.zeros(e.M, g, 1), p, g, e, RegressionBasis(degree=1))
    assert np.mean(np.abs(sol.Y[:, :, 0] - e.W)) < 0.03
    upper = np.concatenate([sol.Z[:, i, i:, 0] for i in range(g.N)], axis=1)
    assert abs(upper.mean() - 1.0) < 0.05


def test_conditional_expectation_oracle(small):
    g, e = small
    p = conditional_expectation_problem(e)
    reg = Regressor(e, CONDITIONAL_EXPECTATION_BASIS)
    sol, rep = solve_mf_bsvie_picard(p, g, e, regressor=reg)
    oracle = np.stack([reg.project(p.psi(i), i) for i in range(g.N + 1)], axis=1)
    assert np.max(np.abs(sol.Y - oracle)) < 1e-8
    assert rep.converged and rep.iterations <= 2


def test_zero_problem_gives_zero(small):
    g, e = small
    sol, rep = solve_mf_bsvie_picard(BackwardProblem(1, lambda i: 0.0, g=lambda t, s, y, z, zh, gm: 0 * y), g, e)
    assert np.all(sol.Y == 0) and np.all(sol.Z == 0)
    assert rep.converged


def test_no_feedback_converges_immediately(small):
    g, e = small
    p = BackwardProblem(1, lambda i: e.W[:, -1:], g=lambda t, s, y, z, zh, gm: np.cos(t + s) + 0 * y,
                        depends_on=frozenset())
    sol, rep = solve_mf_bsvie_picard(p, g, e, tol=1e-8)
    assert rep.converged and rep.iterations == 2
    assert rep.distances[-1] < 1e-8


def test_example_3_3(small):
    g = build_grid(1.0, 20)
    e = sample_ensemble(g, 4000, 2)
    p, F = example_3_3(g, e)
    sol, rep = solve_mf_bsvie_picard(p, g, e, RegressionBasis("state", 3), features=F)
    assert rep.converged and rep.iterations <= 10
    Yc, Zc = closed_form_example_3_3(g, e)
    t = g.nodes
    assert np.max(np.abs(sol.Y[:, :, 0].mean(axis=0) - t * (1 - t))) < 0.1
    assert np.mean((sol.Z[:, :, :, 0] - Zc[None]) ** 2) < 0.05
    assert verify_m_condition(sol, e).passed


def test_linear_deterministic_matches_exponential():
    g = build_grid(1.0, 50)
    e = sample_ensemble(g, 50, 0)
    sol, rep = solve_linear_bsvie(LinearBackwardCoeffs(1, A0=lambda i, j: 1.0), lambda i: 1.0, g, e)
    assert rep.converged
    Y = sol.Y[0, :, 0]
    assert np.max(np.abs(Y - np.exp(1 - g.nodes))) <= DEFAULT_C * g.dt
    ref = deterministic_volterra_solve(lambda i, j: 1.0, lambda i: 1.0, g)[:, 0]
    assert abs(ref[0] - np.e) < 1e-3


def test_zero_coefficients_reduce_to_projection(small):
    g, e = small
    psi = lambda i: np.sin(e.W[:, -1:]) + g.nodes[i]  # noqa: E731
    reg = Regressor(e, RegressionBasis(degree=3))
    sol, _ = solve_linear_bsvie(LinearBackwardCoeffs(1), psi, g, e, regressor=reg)
    # the sweep nests projections; for psi outside the basis span that only approximates a direct one
    for i in (0, 4, 9):
        d = np.abs(sol.Y[:, i] - reg.project(psi(i), i))
        assert d.mean() < 0.01


def test_linear_and_generic_entry_points_agree(small):
    g, e = small
    c = LinearBackwardCoeffs(1, A0=lambda i, j: 0.5, B0=lambda i, j: 0.2, C0=lambda i, j: 0.3,
                             A1=lambda i, j: PairMatrix.constant([[0.4]]))
    psi = lambda i: e.W[:, -1:] + g.nodes[i]  # noqa: E731
    a, _ = solve_linear_bsvie(c, psi, g, e, max_iter=6)
    b, _ = solve_mf_bsvie_picard(linear_backward_as_problem(c, psi, g), g, e, max_iter=6)
    assert m_distance(a, b) < 1e-10


def test_volterra_oracle_examples():
    g = build_grid(1.0, 200)
    np.testing.assert_array_equal(deterministic_volterra_solve(lambda i, j: -1.0, lambda i: 0.0, g), 0.0)
    y = deterministic_volterra_solve(lambda i, j: -1.0, lambda i: g.nodes[i], g)[:, 0]
    assert abs(y[0] - (2 / np.e - 1)) <= DEFAULT_C * g.dt
    np.testing.assert_allclose(y, closed_form_example_5_10(g.nodes, 1.0)[1], atol=DEFAULT_C * g.dt)
    f = lambda i: np.array([np.cos(g.nodes[i]), 1.0])  # noqa: E731
    np.testing.assert_array_equal(deterministic_volterra_solve(lambda i, j: 0.0, f, g),
                                  np.stack([f(i) for i in range(g.N + 1)]))


def test_example_5_10_solutions():
    g = build_grid(1.0, 50)
    e = sample_ensemble(g, 20, 0)
    p0, p1 = example_5_10(g)
    y0, _ = solve_mf_bsvie_picard(p0, g, e)
    y1, _ = solve_mf_bsvie_picard(p1, g, e)
    assert np.all(y0.Y == 0)
    z0, z1 = closed_form_example_5_10(g.nodes, 1.0)
    assert np.max(np.abs(y1.Y[0, :, 0] - z1)) <= DEFAULT_C * g.dt


def test_m_condition_flags_damaged_solution(small):
    g, e = small
    p = BackwardProblem(1, lambda i: e.W[:, -1:], g=None)
    sol, _ = solve_mf_bsvie_picard(p, g, e)
    assert verify_m_condition(sol, e).passed
    broken = sol.copy()
    for i in range(g.N + 1):
        broken.Z[:, i, :i] = 0.0
    rep = verify_m_condition(broken, e)
    assert not rep.passed and len(rep.flagged) >= g.N - 1


def test_m_condition_deterministic_is_exact(small):
    g, e = small
    sol = MSolutionGrid.zeros(e.M, g, 1)
    sol.Y[:] = np.exp(-g.nodes)[None, :, None]
    rep = verify_m_condition(sol, e)
    assert rep.passed and np.all(rep.residual < 1e-28)


@given(st.lists(st.floats(1e-6, 10.0), min_size=3, max_size=12))
def test_geometric_check_accepts_decreasing(ds):
    ds = sorted(ds, reverse=True)
    strictly = all(b < 1.1 * a for a, b in zip(ds, ds[1:]))
    assert PicardReport(distances=ds).geometric_from(1) == strictly


def test_geometric_check_rejects_growth():
    assert not PicardReport(distances=[1.0, 0.5, 0.8, 0.1]).geometric_from(2)
    assert PicardReport(distances=[1.0, 0.5, 0.8, 0.1]).geometric_from(2, floor=1.0)


def test_picard_rejects_bad_tolerance(small):
    g, e = small
    with pytest.raises(InvalidArgument):
        solve_mf_bsvie_picard(BackwardProblem(1, lambda i: 0.0), g, e, tol=0)
