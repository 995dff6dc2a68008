import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mfsvie.acceptance import gradient_check
from mfsvie.control import (ControlProblem, PiecewiseConstant, brute_force_piecewise, check_control,
                            constant_control, directional_derivative, evaluate_cost, gradient_field,
                            grid_resolution, lq_toy, lq_toy_cost, optimize, project_onto_U, solve_adjoint,
                            variational_certificate)
from mfsvie.core import InvalidArgument, InvalidProblem, PairKernel, build_grid, sample_ensemble


@pytest.fixture(scope="module")
def setup():
    grid = build_grid(1.0, 10)
    return grid, sample_ensemble(grid, 500, 3)


def unit_cost(g, **kw):
    return ControlProblem(n=1, m=1, phi=lambda i: 1.0, g=g, lower=[0.0], upper=[1.0], **kw)


def test_constant_cost_integrates_to_horizon(setup):
    grid, ens = setup
    p = unit_cost(lambda t, xu, gam: np.ones(xu.shape[0]))
    J, se = evaluate_cost(constant_control(0.3, p, grid, ens.M), p, grid, ens)
    assert J == pytest.approx(grid.T)
    assert se == pytest.approx(0.0, abs=1e-12)


def test_control_cost_is_half_horizon(setup):
    grid, ens = setup
    p = unit_cost(lambda t, xu, gam: xu[:, 1])
    J, _ = evaluate_cost(constant_control(0.5, p, grid, ens.M), p, grid, ens)
    assert J == pytest.approx(0.5 * grid.T)


def test_lq_toy_cost_matches_quadrature(setup):
    grid, ens = setup
    p = lq_toy()
    for level in (0.0, 0.4, -0.7):
        J, se = evaluate_cost(constant_control(level, p, grid, ens.M), p, grid, ens)
        assert abs(J - lq_toy_cost(np.full(grid.N + 1, level), grid)) <= 3 * se + 1e-12


def test_control_outside_box_rejected(setup):
    grid, ens = setup
    p = lq_toy()
    with pytest.raises(InvalidArgument):
        evaluate_cost(constant_control(1.5, p, grid, ens.M), p, grid, ens)
    with pytest.raises(InvalidArgument):
        check_control(np.zeros((ens.M, grid.N, 1)), p, grid, ens.M)


def test_unbounded_or_empty_box_is_invalid():
    with pytest.raises(InvalidProblem):
        ControlProblem(n=1, m=1, phi=lambda i: 0.0, g=None, lower=[0.0], upper=[np.inf])
    with pytest.raises(InvalidProblem):
        ControlProblem(n=1, m=1, phi=lambda i: 0.0, g=None, lower=[1.0], upper=[0.0])


def test_state_free_cost_gives_zero_adjoint(setup):
    grid, ens = setup
    p = unit_cost(lambda t, xu, gam: xu[:, 1] ** 2, b=lambda t, s, xu, gam: xu[:, :1] + xu[:, 1:])
    adj = solve_adjoint(constant_control(0.2, p, grid, ens.M), p, grid, ens)
    assert np.abs(adj.solution.Y).max() == 0
    assert np.abs(adj.solution.Z).max() == 0


def test_control_free_dynamics_adjoint_is_free_term(setup):
    grid, ens = setup
    # b independent of x: no Volterra feedback, Y(t) = -g_x at t_i
    p = unit_cost(lambda t, xu, gam: 0.5 * xu[:, 0] ** 2, b=lambda t, s, xu, gam: xu[:, 1:])
    u = constant_control(0.5, p, grid, ens.M)
    adj = solve_adjoint(u, p, grid, ens)
    X = adj.X[:, :, 0]
    np.testing.assert_allclose(adj.solution.Y[:, :grid.N, 0], -X[:, :grid.N], atol=1e-6)
    assert np.all(adj.solution.Y[:, grid.N] == 0)


def test_linear_control_cost_has_unit_gradient(setup):
    grid, ens = setup
    p = unit_cost(lambda t, xu, gam: xu[:, 1])
    u = constant_control(0.5, p, grid, ens.M)
    G = gradient_field(u, solve_adjoint(u, p, grid, ens), p, grid, ens)
    np.testing.assert_allclose(G[:, :grid.N], 1.0, atol=1e-6)
    assert np.all(G[:, grid.N] == 0)


def test_control_free_problem_has_zero_gradient(setup):
    grid, ens = setup
    p = unit_cost(lambda t, xu, gam: xu[:, 0] ** 2, b=lambda t, s, xu, gam: -xu[:, :1],
                  sigma=lambda t, s, xu, gam: 0.3 * xu[:, :1])
    u = constant_control(0.5, p, grid, ens.M)
    G = gradient_field(u, solve_adjoint(u, p, grid, ens), p, grid, ens)
    assert np.abs(G).max() == pytest.approx(0.0, abs=1e-9)


def test_directional_derivative_is_time_average():
    grid = build_grid(1.0, 4)
    G = np.ones((3, 5, 1))
    assert directional_derivative(G, np.full((3, 5, 1), 2.0), grid) == pytest.approx(2.0)


def test_projection_cases():
    lo, hi = np.array([0.0, -1.0]), np.array([1.0, 1.0])
    np.testing.assert_array_equal(project_onto_U([0.5, 0.0], lo, hi), [0.5, 0.0])
    np.testing.assert_array_equal(project_onto_U([2.0, -3.0], lo, hi), [1.0, -1.0])


@given(arrays(float, (6, 2), elements=st.floats(-10, 10)))
def test_projection_idempotent_and_feasible(u):
    lo, hi = np.array([0.0, -1.0]), np.array([1.0, 2.0])
    once = project_onto_U(u, lo, hi)
    np.testing.assert_array_equal(project_onto_U(once, lo, hi), once)
    assert np.all(once >= lo) and np.all(once <= hi)


def test_certificate_cases():
    lo, hi = np.array([0.0]), np.array([1.0])
    u = np.full((4, 3, 1), 0.5)
    assert variational_certificate(u, np.zeros_like(u), lo, hi) == 0
    assert variational_certificate(np.zeros_like(u), np.full_like(u, 2.0), lo, hi) == 0
    assert variational_certificate(u, np.full_like(u, 2.0), lo, hi) == pytest.approx(-1.0)
    assert variational_certificate(u, np.full_like(u, -2.0), lo, hi) == pytest.approx(-1.0)


@given(arrays(float, (5, 1), elements=st.floats(0, 1)), arrays(float, (5, 1), elements=st.floats(-5, 5)))
def test_certificate_never_positive(u, G):
    assert variational_certificate(u, G, np.array([0.0]), np.array([1.0])) <= 0


@pytest.mark.parametrize("sign, target", [(1.0, 0.0), (-1.0, 1.0)])
def test_linear_cost_is_bang_bang(setup, sign, target):
    grid, ens = setup
    p = unit_cost(lambda t, xu, gam: sign * xu[:, 1])
    out = optimize(p, constant_control(0.5, p, grid, ens.M), grid, ens)
    assert out.converged
    np.testing.assert_allclose(out.u[:, :grid.N], target)
    assert out.J == pytest.approx(sign * target * grid.T)
    assert out.certificate == pytest.approx(0.0, abs=1e-12)


def test_iterates_stay_feasible_and_cost_decreases(setup):
    grid, ens = setup
    p = lq_toy()
    out = optimize(p, constant_control(0.9, p, grid, ens.M), grid, ens, max_iter=15)
    assert np.all(out.u >= -1) and np.all(out.u <= 1)
    J = [row[1] for row in out.trace]
    assert all(b <= a for a, b in zip(J, J[1:]))


def test_lq_gradient_matches_finite_differences():
    grid = build_grid(1.0, 25)
    ens = sample_ensemble(grid, 2000, 11)
    rows = gradient_check(lq_toy(), grid, ens)
    assert max(r["relative_error"] for r in rows) < 0.02


def test_stochastic_controlled_diffusion_gradient():
    # control enters the diffusion and a mean-field drift; regression makes the adjoint approximate
    grid = build_grid(1.0, 10)
    ens = sample_ensemble(grid, 4000, 2)
    kernel = PairKernel(1, left=lambda t, s, x: np.ones(x.shape[:-1] + (1, 1)), right=lambda t, s, xp: xp[..., :1])
    p = ControlProblem(n=1, m=1, phi=lambda i: 1.0, g=lambda t, xu, gam: xu[:, 0] ** 2 + 0.5 * xu[:, 1] ** 2,
                       lower=[-1.0], upper=[1.0], b=lambda t, s, xu, gam: -0.5 * gam + xu[:, 1:],
                       sigma=lambda t, s, xu, gam: 0.2 * (1 + xu[:, 1:]), theta_b=kernel)
    rows = gradient_check(p, grid, ens, levels=(0.2,))
    assert max(r["relative_error"] for r in rows) < 0.02


def test_piecewise_labels_cover_grid():
    grid = build_grid(1.0, 10)
    par = PiecewiseConstant(grid, 2)
    np.testing.assert_array_equal(par.labels, [0] * 5 + [1] * 6)
    np.testing.assert_allclose(par.weights(), [0.5, 0.5])
    with pytest.raises(InvalidArgument):
        PiecewiseConstant(grid, 0)


def test_two_piece_optimum_matches_brute_force():
    grid = build_grid(1.0, 10)
    ens = sample_ensemble(grid, 4, 1)
    p = lq_toy()
    par = PiecewiseConstant(grid, 2)
    out = optimize(p, np.zeros((2, 1)), grid, ens, parameterisation=par)
    theta, J_bf, se, table = brute_force_piecewise(p, par, grid, ens, levels=21)
    assert out.certified
    assert out.J <= J_bf + 3 * se + 1e-12
    assert J_bf - out.J <= grid_resolution(table)
    np.testing.assert_allclose(out.theta, theta, atol=0.1 + 1e-9)
