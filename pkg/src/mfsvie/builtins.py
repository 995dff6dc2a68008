"""Named problem instances shared by the scenario runner and the acceptance battery."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backward import BackwardProblem, LinearBackwardCoeffs, LinearBackwardProblem, example_3_3, example_5_10
from .core import PairKernel, PairMatrix, PathEnsemble, RegressionBasis, TimeGrid
from .forward import ForwardProblem, LinearForwardCoeffs, example_5_2_problem, example_5_4, linear_as_problem


@dataclass(frozen=True)
class Builtin:
    name: str
    kind: str
    description: str


BUILTINS = {b.name: b for b in [
    Builtin("example-5.2", "forward", "X = 1 + int E[X] dW; closed form 1 + W, negative with probability Phi(-1) at t=1"),
    Builtin("example-5.4", "forward", "X = T - t + int b X ds + int sigma X dW (params b, sigma); closed form known"),
    Builtin("example-3.3", "backward", "surrogate with psi1(s) = s, T = 1; closed form Y and Z(t,s) = psi1(s)"),
    Builtin("example-5.10", "backward", "shifted generators without monotonicity; ordering fails on [0, T - ln(T+1))"),
    Builtin("linear-deterministic", "backward", "Y = 1 + int_t^T Y ds; deterministic Volterra oracle"),
    Builtin("conditional-expectation", "backward", "zero generator, adapted cubic psi(t) in the basis span; Y = psi"),
    Builtin("scalar", "duality", "A0 = a, phi = psi = 1; both pairings equal (e^{aT} - 1)/a up to O(dt)"),
    Builtin("random", "duality", "seeded bounded linear coefficients, n = 2 (param seed)"),
    Builtin("twice-adjoint-forward", "duality", "deterministic forward coefficients; round trip is exact"),
    Builtin("twice-adjoint-backward", "duality", "backward Cbar0(t,s) = W(s); round trip loses F_s information"),
    Builtin("positive-5.5", "compare", "A0 = 1, C0 = 1, phi = 1: X >= phi >= 0"),
    Builtin("positive-5.7", "compare", "drift 0.5 x + Gamma with Gamma = E'[0.5 x'], drift shifted by +1"),
    Builtin("positive-5.8", "compare", "linear backward A0 = 1, C0 = 0.5, A1 = 0.5, psi = W(T)^2"),
    Builtin("positive-5.9", "compare", "generator Gamma = E'[(y + y')/2], shifted by +1, psi = W(T)"),
    Builtin("counterexamples", "compare", "Examples 5.2, 5.4, 5.10 and the four cone observations"),
    Builtin("example-5.2-negative", "compare", "negative fraction of Example 5.2 at t = 1"),
    Builtin("example-5.4-negative", "compare", "Example 5.4 with b = -1, sigma = 0: X(T) < 0"),
    Builtin("example-5.10-order", "compare", "sign change of Y1 - Y0 near 1 - ln 2"),
    Builtin("lq-toy", "control", "n = m = 1, b = u, sigma = 0, g = x tanh x + u^2, phi = 1, U = [-1, 1]"),
    Builtin("acceptance", "suite", "the full acceptance battery"),
]}


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def positive_5_5(grid: TimeGrid) -> ForwardProblem:
    c = LinearForwardCoeffs(1, A0=lambda i, j: 1.0, C0=lambda i, j: PairMatrix.constant([[1.0]]))
    p = linear_as_problem(c, lambda i: 1.0, grid)
    p.name = "positive-5.5"
    return p


def positive_5_7() -> tuple[ForwardProblem, ForwardProblem]:
    theta = PairKernel(1, left=lambda t, s, x: np.full(x.shape[:-1] + (1, 1), 0.5), right=lambda t, s, xp: xp[..., :1])

    def b0(t, s, x, gam):
        return 0.5 * x + gam

    def b1(t, s, x, gam):
        return 0.5 * x + gam + 1.0

    def sigma(t, s, x, gam):
        return 0.3 * x

    p0 = ForwardProblem(1, lambda i: 1.0, b=b0, sigma=sigma, theta_b=theta, name="positive-5.7-base")
    p1 = ForwardProblem(1, lambda i: 1.0, b=b1, sigma=sigma, theta_b=theta, name="positive-5.7")
    return p0, p1


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def _half_sum_kernel():
    """theta(y, y') = (y + y') / 2 written as a rank-2 product."""
    return PairKernel(1, left=lambda t, s, x: np.concatenate([0.5 * x[..., :1, None],
                                                              np.full(x.shape[:-1] + (1, 1), 0.5)], -1),
                      right=lambda t, s, xp: np.concatenate([np.ones(xp.shape[:-1] + (1,)), xp[..., :1]], -1))


def positive_5_9(ensemble: PathEnsemble) -> tuple[BackwardProblem, BackwardProblem]:
    WT = ensemble.W[:, -1:]
    th = _half_sum_kernel()
    slots = frozenset({"y", "gamma"})
    q0 = BackwardProblem(1, lambda i: WT, g=lambda t, s, y, z, zh, gm: gm, theta=th, depends_on=slots,
                         name="positive-5.9-base")
    q1 = BackwardProblem(1, lambda i: WT, g=lambda t, s, y, z, zh, gm: gm + 1.0, theta=th, depends_on=slots,
                         name="positive-5.9")
    return q0, q1


def positive_5_8(ensemble: PathEnsemble) -> LinearBackwardProblem:
    WT = ensemble.W[:, -1:]
    c = LinearBackwardCoeffs(1, A0=lambda i, j: 1.0, C0=lambda i, j: 0.5, A1=lambda i, j: 0.5)
    return LinearBackwardProblem(c, lambda i: WT ** 2, name="positive-5.8")


def linear_deterministic() -> tuple[LinearBackwardCoeffs, float]:
    return LinearBackwardCoeffs(1, A0=lambda i, j: 1.0), 1.0


def conditional_expectation_problem(ensemble: PathEnsemble) -> BackwardProblem:
    """Zero generator with the adapted cubic free term psi(t) = cos t + (1 + t) W(t) - 0.3 W(t)^2 + 0.1 t W(t)^3.

    psi(t) lies in the node-t span of a degree-3 W basis, and with anchor
    degree 3 every nested projection of a row is exact, so the solver must
    return psi itself up to rounding.
    """
    W, t = ensemble.W, ensemble.grid.nodes
    vals = np.cos(t) + (1 + t) * W - 0.3 * W ** 2 + 0.1 * t * W ** 3
    return BackwardProblem(1, lambda i: vals[:, i:i + 1], g=None, name="conditional-expectation")


CONDITIONAL_EXPECTATION_BASIS = RegressionBasis(kind="W", degree=3, anchor=3)


# ---------------------------------------------------------------------------
# duality
# ---------------------------------------------------------------------------


def scalar_duality(a: float = 1.0):
    """Coefficients, phi, psi and the analytic value (e^{aT} - 1)/a of both pairings (T = 1 scaled by grid)."""
    return LinearForwardCoeffs(1, A0=lambda i, j: a), (lambda i: 1.0), (lambda i: 1.0)


def scalar_duality_value(a: float, T: float) -> float:
    return float(np.expm1(a * T) / a) if a != 0 else T


def random_duality(seed: int, grid: TimeGrid, ensemble: PathEnsemble, bound: float = 0.5):
    """Bounded linear coefficients with deterministic blocks and a W-feature free term."""
    rng = np.random.default_rng(seed)
    M0, M1, K1, P0, P1 = (rng.uniform(-bound, bound, (2, 2)) for _ in range(5))
    v, w = rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2)
    a = rng.uniform(0.5, 1.5, 2)
    nodes = grid.nodes
    W = ensemble.W
    c = LinearForwardCoeffs(2, A0=lambda i, j: M0 + M1 * np.cos(nodes[i] - nodes[j]),
                            A1=lambda i, j: K1 * (1 + nodes[j]),
                            C0=lambda i, j: PairMatrix.constant(P0), C1=lambda i, j: PairMatrix.constant(P1),
                            bound=4 * bound)
    phi = lambda i: a * np.cos(nodes[i])  # noqa: E731
    psi = lambda i: v + w * W[:, i, None]  # noqa: E731
    return c, phi, psi


def twice_adjoint_forward(seed: int, grid: TimeGrid) -> LinearForwardCoeffs:
    rng = np.random.default_rng(seed)
    M0, K1, P0, P1 = (rng.uniform(-0.5, 0.5, (2, 2)) for _ in range(4))
    nodes = grid.nodes
    return LinearForwardCoeffs(2, A0=lambda i, j: M0 * (1 + nodes[i] * nodes[j]), A1=lambda i, j: K1,
                               C0=lambda i, j: PairMatrix.constant(P0 * np.exp(-nodes[i])),
                               C1=lambda i, j: PairMatrix.constant(P1))


def twice_adjoint_backward(ensemble: PathEnsemble) -> LinearBackwardCoeffs:
    W = ensemble.W
    return LinearBackwardCoeffs(1, C0=lambda t, s: W[:, s].reshape(-1, 1, 1), path_dependent=frozenset({"C0"}))

