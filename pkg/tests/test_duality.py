import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfsvie import builtins as bi
from mfsvie.acceptance import duality_bias_constant
from mfsvie.backward import LinearBackwardCoeffs, solve_linear_bsvie
from mfsvie.core import (InvalidArgument, MSolutionGrid, PairMatrix, RegressionBasis, UnsupportedStructure,
                         build_grid, sample_ensemble)
from mfsvie.duality import (build_bsvie_adjoint, build_fsvie_adjoint, check_twice_adjoint, duality_pairing)
from mfsvie.forward import LinearForwardCoeffs, solve_linear_fsvie


def test_zero_coefficients_give_zero_adjoint():
    adj = build_fsvie_adjoint(LinearForwardCoeffs(2))
    assert all(getattr(adj, k) is None for k in ("A0", "B0", "C0", "A1", "B1", "C1"))
    back = build_bsvie_adjoint(LinearBackwardCoeffs(2))
    assert all(getattr(back, k) is None for k in ("A0", "A1", "C0", "C1"))


def test_scalar_block_is_symmetric():
    adj = build_fsvie_adjoint(LinearForwardCoeffs(2, A0=lambda i, j: 0.7 * np.eye(2)))
    np.testing.assert_array_equal(adj.A0(3, 5), 0.7 * np.eye(2))
    assert adj.A1 is None and adj.C0 is None and adj.C1 is None
    back = build_bsvie_adjoint(LinearBackwardCoeffs(2, A0=lambda i, j: 0.7 * np.eye(2)))
    np.testing.assert_array_equal(back.A0(5, 3), 0.7 * np.eye(2))


def test_forward_pair_block_two_particles():
    # C0 = M constant: E'[M x'] for the forward equation, E*[M^T y] for the adjoint
    Mx = np.array([[1.0, 2.0], [-1.0, 0.5]])
    adj = build_fsvie_adjoint(LinearForwardCoeffs(2, C0=lambda i, j: PairMatrix.constant(Mx)))
    P = adj.pair("A1", 4, 2)
    y = np.array([[1.0, -2.0], [3.0, 0.5]])
    # hand enumeration: out[m] = mean_k M^T y_k
    expected = np.tile(Mx.T @ y.mean(axis=0), (2, 1))
    np.testing.assert_allclose(P.apply_prime(y), expected)


def test_deterministic_backward_diffusion_passes_through():
    C = np.array([[0.2, 0.0], [0.1, -0.3]])
    back = build_bsvie_adjoint(LinearBackwardCoeffs(2, C0=lambda i, j: C * (1 + j)))
    np.testing.assert_allclose(back.A1(5, 2), (C * (1 + 5)).T)


def test_backward_adjoint_refuses_z_drift():
    with pytest.raises(UnsupportedStructure):
        build_bsvie_adjoint(LinearBackwardCoeffs(1, B0=lambda i, j: 1.0))


def test_path_dependent_needs_ensemble():
    with pytest.raises(InvalidArgument):
        build_bsvie_adjoint(LinearBackwardCoeffs(1, C0=lambda i, j: 1.0, path_dependent=frozenset({"C0"})))


def test_zero_free_terms_pair_to_zero():
    g = build_grid(1.0, 10)
    e = sample_ensemble(g, 100, 0)
    c = LinearForwardCoeffs(1, A0=lambda i, j: 1.0)
    X = solve_linear_fsvie(c, lambda i: 0.0, g, e)
    Y = MSolutionGrid.zeros(e.M, g, 1)
    rep = duality_pairing(X, lambda i: 1.0, Y, lambda i: 0.0, g)
    assert rep.lhs == 0 and rep.rhs == 0 and rep.passed


def test_scalar_case_close_to_analytic():
    g = build_grid(1.0, 50)
    e = sample_ensemble(g, 200, 0)
    c, phi, psi = bi.scalar_duality(1.0)
    X = solve_linear_fsvie(c, phi, g, e)
    Y, rep = solve_linear_bsvie(build_fsvie_adjoint(c), psi, g, e, max_iter=20)
    C = duality_bias_constant(1.0)
    d = duality_pairing(X, psi, Y, phi, g, bias=C * g.dt)
    assert d.passed
    assert abs(d.lhs - (np.e - 1)) <= C * g.dt and abs(d.rhs - (np.e - 1)) <= C * g.dt


def test_bias_constant_is_calibrated_with_margin():
    C = duality_bias_constant(1.0)
    # the discrete lhs is (1 + h)^(N + 1) - 1 with h = 1 / N
    h = 1 / 25
    assert C == pytest.approx(1.1 * abs((1 + h) ** 26 - 1 - (np.e - 1)) / h, rel=1e-9)


@pytest.mark.slow
@settings(max_examples=5)
@given(st.integers(0, 1000))
def test_random_coefficients_satisfy_identity(seed):
    g = build_grid(1.0, 12)
    e = sample_ensemble(g, 3000, seed)
    c, phi, psi = bi.random_duality(seed, g, e)
    X = solve_linear_fsvie(c, phi, g, e)
    Y, _ = solve_linear_bsvie(build_fsvie_adjoint(c), psi, g, e, RegressionBasis(degree=3), max_iter=15)
    assert duality_pairing(X, psi, Y, phi, g, bias=duality_bias_constant(1.0) * g.dt).passed


def test_twice_adjoint_forward_is_exact():
    g = build_grid(1.0, 8)
    rep = check_twice_adjoint(bi.twice_adjoint_forward(3, g), g, sample_ensemble(g, 10, 0))
    assert rep.equal and all(v == 0 for v in rep.max_difference.values())


def test_twice_adjoint_backward_deterministic_and_path_dependent():
    g = build_grid(1.0, 10)
    e = sample_ensemble(g, 3000, 1)
    det = LinearBackwardCoeffs(1, C0=lambda i, j: 0.5 + g.nodes[j], path_dependent=frozenset({"C0"}))
    rep = check_twice_adjoint(det, g, e)
    assert rep.discrepancy["C0"] < 1e-12 and rep.equal
    rep = check_twice_adjoint(bi.twice_adjoint_backward(e), g, e)
    assert not rep.equal and rep.ratio("C0") >= 10


def test_pairing_shape_checks():
    g = build_grid(1.0, 4)
    e = sample_ensemble(g, 5, 0)
    X = solve_linear_fsvie(LinearForwardCoeffs(1), lambda i: 1.0, g, e)
    with pytest.raises(InvalidArgument):
        duality_pairing(X, 1.0, MSolutionGrid.zeros(6, g, 1), 1.0, g)
