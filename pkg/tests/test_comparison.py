import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mfsvie import builtins as bi
from mfsvie.comparison import (ConeTag, compare_backward, compare_forward, cone_membership, cone_violation,
                               counterexample_suite, example_5_10_sign_change, validate_hypotheses)
from mfsvie.core import InvalidArgument, UnsupportedStructure, build_grid, sample_ensemble
from mfsvie.forward import ForwardProblem, LinearForwardCoeffs, example_5_2_problem, example_5_4


@pytest.fixture(scope="module")
def small():
    grid = build_grid(1.0, 20)
    return grid, sample_ensemble(grid, 1000, 5)


def test_identity_in_cones():
    assert cone_membership(np.eye(3), ConeTag.MPLUS)
    assert cone_membership(np.eye(3), ConeTag.MZERO)
    assert cone_membership(np.eye(3), ConeTag.MHAT_PLUS)


def test_negative_offdiagonal_not_in_mplus():
    A = np.array([[1.0, -1.0], [0.0, 1.0]])
    assert not cone_membership(A, ConeTag.MPLUS)
    assert cone_violation(A, ConeTag.MPLUS) == -1.0


def test_negative_diagonal_allowed_in_mplus_only():
    A = np.array([[-2.0, 0.5], [0.0, -1.0]])
    assert cone_membership(A, ConeTag.MPLUS)
    assert not cone_membership(A, ConeTag.MHAT_PLUS)
    assert not cone_membership(A, ConeTag.MZERO)


def test_mzero_rejects_any_offdiagonal():
    assert cone_violation(np.array([[0.0, 0.2], [0.0, 0.0]]), ConeTag.MZERO) == pytest.approx(-0.2)


def test_cone_rejects_non_square():
    with pytest.raises(InvalidArgument):
        cone_violation(np.ones((2, 3)), ConeTag.MPLUS)


def test_cone_batches_leading_axes():
    A = np.stack([np.eye(2), np.array([[1.0, -0.5], [0.0, 1.0]])])
    assert cone_violation(A, ConeTag.MPLUS) == -0.5


def test_nonnegative_matrices_preserve_the_orthant():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 5))
        A = rng.uniform(0, 2, size=(n, n))
        assert cone_membership(A, ConeTag.MHAT_PLUS)
        x = rng.uniform(0, 3, size=(100, n))
        assert (x @ A.T >= 0).all()


@given(arrays(float, (3, 3), elements=st.floats(-2, 2)))
def test_coordinate_witness_exposes_negative_entries(A):
    # some x >= 0 with (A x)_k < 0 exists iff A has a negative entry; e_j is the witness
    witnessed = any((A @ e < 0).any() for e in np.eye(3))
    assert witnessed == (not cone_membership(A, ConeTag.MHAT_PLUS))


def test_example_5_2_violates_p53(small):
    grid, ens = small
    rep = validate_hypotheses(example_5_2_problem(), "P5.3", grid, ens)
    assert not rep.passed
    assert any("nonlocal diffusion" in v.name for v in rep.violations)


def test_constant_symmetric_drift_satisfies_p53(small):
    grid, ens = small
    c = LinearForwardCoeffs(2, A0=lambda i, j: np.array([[0.0, 1.0], [1.0, 0.0]]),
                            A1=lambda i, j: np.diag([0.5, -0.3]))
    assert validate_hypotheses(c, "P5.3", grid, ens, phi=lambda i: np.ones(2)).passed


def test_p53_flags_negative_offdiagonal_drift(small):
    grid, ens = small
    c = LinearForwardCoeffs(2, A0=lambda i, j: np.array([[0.0, 0.0], [-1.0, 0.0]]))
    rep = validate_hypotheses(c, "P5.3", grid, ens, phi=lambda i: np.ones(2))
    assert [v.name for v in rep.violations] == ["A0 in Mplus"]


def test_example_5_4_against_zero_solution_violates_t57(small):
    # X0 = 0 solves the same equation with phi0 = 0; phi1 - phi0 = T - t decreases
    grid, ens = small
    p1 = example_5_4(0.0, 1.0, grid)
    p0 = ForwardProblem(n=1, phi=lambda i: 0.0, b=p1.b, sigma=p1.sigma)
    rep = validate_hypotheses((p0, p1), "T5.7", grid, ens)
    assert "phi1 - phi0 nondecreasing in t" in [v.name for v in rep.violations]


def test_t57_flags_time_dependent_diffusion(small):
    grid, ens = small
    p = ForwardProblem(n=1, phi=lambda i: 1.0, sigma=lambda t, s, x, g: (1 + t) * x)
    rep = validate_hypotheses((p, p), "T5.7", grid, ens)
    assert "sigma independent of t" in [v.name for v in rep.violations]


def test_unknown_theorem_tag(small):
    with pytest.raises(InvalidArgument):
        validate_hypotheses(example_5_2_problem(), "T9.9", *small)


def test_identical_forward_problems_compare_equal(small):
    grid, ens = small
    p = bi.positive_5_5(grid)
    rep = compare_forward(p, p, grid, ens, "T5.7")
    assert rep.passed
    assert np.all(rep.worst == 0) and np.all(rep.pathwise_worst == 0)


def test_identical_backward_problems_compare_equal(small):
    grid, ens = small
    q0, _ = bi.positive_5_9(ens)
    rep = compare_backward(q0, q0, grid, ens, "T5.9")
    assert rep.passed and np.all(rep.worst == 0)


def test_p55_instance_stays_above_free_term(small):
    grid, ens = small
    rep = compare_forward(None, bi.positive_5_5(grid), grid, ens, "P5.5")
    assert rep.passed and rep.hypotheses.passed
    assert rep.pathwise_worst.min() >= -1e-12


def test_t57_instance_is_ordered(small):
    grid, ens = small
    rep = compare_forward(*bi.positive_5_7(), grid, ens, "T5.7")
    assert rep.passed and rep.hypotheses.passed


def test_t59_instance_is_ordered(small):
    grid, ens = small
    rep = compare_backward(*bi.positive_5_9(ens), grid, ens, "T5.9")
    assert rep.passed and rep.hypotheses.passed


def test_t59_rejects_z_dependent_generators(small):
    grid, ens = small
    from mfsvie.backward import BackwardProblem
    p = BackwardProblem(n=1, psi=lambda i: 1.0, g=lambda t, s, y, z, zh, gm: z, depends_on=frozenset({"z"}))
    with pytest.raises(UnsupportedStructure):
        compare_backward(p, p, grid, ens, "T5.9")


def test_forward_compare_needs_forward_tag(small):
    grid, ens = small
    p = bi.positive_5_5(grid)
    with pytest.raises(InvalidArgument):
        compare_forward(p, p, grid, ens, "T5.9")


def test_example_5_10_fails_before_crossing(small):
    grid, ens = small
    entry, rep = example_5_10_sign_change(grid, ens)
    assert not rep.passed
    assert entry.violation_found and entry.within_reference
    edge = 1 - math.log(2)
    bad = rep.nodes[rep.violating_nodes]
    assert bad.max() < edge
    assert rep.profile[0, 0] == pytest.approx(2 * math.exp(-1) - 1, abs=0.05)


@pytest.mark.slow
def test_counterexample_suite_finds_every_violation():
    grid = build_grid(1.0, 50)
    rep = counterexample_suite(grid, sample_ensemble(grid, 10_000, 11))
    assert rep.all_violations_found and rep.passed
    e = rep.entry("example-5.2")
    assert abs(e.statistic - 0.1587) < 3 * math.sqrt(0.1587 * 0.8413 / 10_000)
    assert rep.entry("example-5.4(b=-1,sigma=0)").statistic < 0
