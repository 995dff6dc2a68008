"""Optimal control of mean-field forward SVIEs through the adjoint MF-BSVIE.

The controlled state is

    X(t) = phi(t) + int_0^t b(t,s,X,u,Gamma^b) ds + int_0^t sigma(t,s,X,u,Gamma^sigma) dW

with ``Gamma = E'[theta(t, s, X, u, X', u')]`` and the Lagrange cost
``J(u) = E int_0^T g(t, X, u, Gamma^g) dt``.  Everything is discretised on
the grid exactly as the forward Euler scheme does it: left-endpoint sums,
with the cost summed over nodes ``0..N-1``.  With exact conditional
expectations the gradient computed here is the exact derivative of the
discrete cost, which is what the finite-difference checks rely on.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .backward import LinearBackwardProblem, PicardReport, solve_mf_bsvie_picard
from .core import (InvalidArgument, InvalidProblem, MSolutionGrid, PairKernel, PairMatrix, PathEnsemble,
                   RegressionBasis, Regressor, TimeGrid, UnsupportedStructure, as_particle_array,
                   complete_lower_triangle, fd_jacobian, pair_average, standard_error)
from .duality import build_fsvie_adjoint
from .forward import ForwardProblem, LinearForwardCoeffs, StateGrid, solve_mf_fsvie

log = logging.getLogger(__name__)


@dataclass
class ControlProblem:
    """Box-constrained control problem for an MF-FSVIE.

    ``b``, ``sigma`` and the kernels receive the concatenated local state
    ``xu = [x, u]`` of shape (M, n + m), in both kernel slots.  ``g`` is called
    as ``g(t, xu, gamma)`` and returns one cost value per particle;
    ``theta_g`` is evaluated as ``theta_g(t, t, xu, xu')``.  Kernels must be
    separable for the adjoint (their pair derivatives are then low rank).
    """

    n: int
    m: int
    phi: Callable
    g: Callable
    lower: Sequence[float]
    upper: Sequence[float]
    b: Callable | None = None
    sigma: Callable | None = None
    theta_b: PairKernel | None = None
    theta_sigma: PairKernel | None = None
    theta_g: PairKernel | None = None
    name: str = ""

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != (self.m,) or hi.shape != (self.m,):
            raise InvalidProblem(f"control bounds must have {self.m} components")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise InvalidProblem("control set must be bounded")
        if np.any(lo > hi):
            raise InvalidProblem("control set is empty (lower bound above upper bound)")
        self.lower, self.upper = lo, hi

    @property
    def interacting(self) -> bool:
        return any(k is not None for k in (self.theta_b, self.theta_sigma, self.theta_g))

    def forward(self) -> ForwardProblem:
        return ForwardProblem(n=self.n, phi=self.phi, b=self.b, sigma=self.sigma, theta_b=self.theta_b,
                              theta_sigma=self.theta_sigma, name=self.name)


def project_onto_U(u, lower, upper) -> np.ndarray:
    """Componentwise clamp of control values (last axis) into the box."""
    return np.clip(np.asarray(u, dtype=float), lower, upper)


def constant_control(value, p: ControlProblem, grid: TimeGrid, M: int) -> np.ndarray:
    u = np.empty((M, grid.N + 1, p.m))
    u[:] = np.broadcast_to(np.asarray(value, dtype=float), (p.m,))
    return u


def check_control(u, p: ControlProblem, grid: TimeGrid, M: int) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape != (M, grid.N + 1, p.m):
        raise InvalidArgument(f"control field has shape {u.shape}, expected {(M, grid.N + 1, p.m)}")
    if not np.all(np.isfinite(u)):
        raise InvalidArgument("control field has non-finite values")
    if np.any(u < p.lower - 1e-12) or np.any(u > p.upper + 1e-12):
        raise InvalidArgument("control field leaves the control set")
    return u


def _local(X, u, j):
    return np.concatenate([X[:, j], u[:, j]], axis=1)


def _batch(v, K, w):
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 1 and arr.shape[0] == K and (w == 1 or K != w):
        arr = arr[:, None]
    return np.broadcast_to(arr, (K, w))


def _running_cost(p: ControlProblem, t, xu):
    gam = pair_average(p.theta_g, "prime", t, t, xu) if p.theta_g is not None else None
    return _batch(p.g(t, xu, gam), xu.shape[0], 1)[:, 0]


def cost_samples(u, p: ControlProblem, grid: TimeGrid, ensemble: PathEnsemble, X: np.ndarray | None = None):
    """Per-particle discrete cost ``sum_{i<N} g(t_i, X_i, u_i, Gamma^g_i) dt``."""
    if X is None:
        X = solve_mf_fsvie(p.forward(), grid, ensemble, control=u).X
    total = np.zeros(ensemble.M)
    for i in range(grid.N):
        total += _running_cost(p, grid.nodes[i], _local(X, u, i)) * grid.dt
    return total


def evaluate_cost(u, p: ControlProblem, grid: TimeGrid, ensemble: PathEnsemble) -> tuple[float, float]:
    u = check_control(u, p, grid, ensemble.M)
    samples = cost_samples(u, p, grid, ensemble)
    return float(samples.mean()), float(standard_error(samples))


# ---------------------------------------------------------------------------
# linearisation at a trajectory
# ---------------------------------------------------------------------------


def _compress(a):
    """Drop the particle axis of blocks shared by all particles; None for zero blocks."""
    if a is None or not np.any(a):
        return None
    if a.shape[0] > 1 and np.all(a == a[:1]):
        return a[:1].copy()
    return a


def _field_derivatives(f, kernel, t, s, xu, width):
    """Linearisation of ``f(t, s, xu, E'[theta(xu, xu')])`` in ``xu`` and ``xu'``.

    Returns the local Jacobian (M, width, n + m) including the E'theta_x
    term, and the pair factors ``(L, R)`` with ``C(m, k) = L[m] @ R[k]``.
    """
    M = xu.shape[0]
    if kernel is None:
        jac = fd_jacobian(lambda a: _batch(f(t, s, a, None), a.shape[0], width), [xu], 0)
        return jac, None
    if not kernel.separable:
        raise UnsupportedStructure("control linearisation needs separable kernels (pair derivatives are O(M^2))")
    gam = pair_average(kernel, "prime", t, s, xu)

    def fg(a, gm):
        return _batch(f(t, s, a, gm), a.shape[0], width)

    jac = fd_jacobian(fg, [xu, gam], 0)
    f_gam = fd_jacobian(fg, [xu, gam], 1)
    L = np.asarray(kernel.left(t, s, xu), dtype=float)
    L = np.broadcast_to(L, (M,) + L.shape[-2:])
    Rbar = np.broadcast_to(np.asarray(kernel.right(t, s, xu), dtype=float), (M, L.shape[-1])).mean(axis=0)
    r = L.shape[-1]
    e_theta = fd_jacobian(lambda a: np.broadcast_to(np.asarray(kernel.left(t, s, a), dtype=float),
                                                    (a.shape[0], kernel.dim, r)) @ Rbar, [xu], 0)
    r_jac = fd_jacobian(lambda a: np.broadcast_to(np.asarray(kernel.right(t, s, a), dtype=float),
                                                  (a.shape[0], r)), [xu], 0)
    return jac + f_gam @ e_theta, (f_gam @ L, r_jac)


def _pair(parts, sl):
    if parts is None:
        return None
    L, R = _compress(parts[0]), _compress(parts[1][..., sl])
    if L is None or R is None:
        return None
    return PairMatrix(L=L, R=R)


class Linearisation:
    """Coefficient blocks of the first variation around ``(X, u)``.

    Forward blocks are grouped by row (the node ``t_i``) and cached a few rows
    at a time, since the backward sweep asks for one row per step.
    """

    def __init__(self, p: ControlProblem, grid: TimeGrid, X: np.ndarray, u: np.ndarray, cache_rows: int = 4):
        self.p, self.grid, self.X, self.u = p, grid, X, u
        self.n, self.m = p.n, p.m
        self.row = lru_cache(maxsize=cache_rows)(self._row)

    def _row(self, i: int) -> list[dict]:
        p, n = self.p, self.n
        t = self.grid.nodes[i]
        xs, us = slice(0, n), slice(n, n + self.m)
        out = []
        for j in range(i):
            s = self.grid.nodes[j]
            xu = _local(self.X, self.u, j)
            blocks = dict.fromkeys(("A0", "B0", "C0", "D0", "A1", "B1", "C1", "D1"))
            for f, kern, (a, bb, c, d) in ((p.b, p.theta_b, ("A0", "B0", "C0", "D0")),
                                          (p.sigma, p.theta_sigma, ("A1", "B1", "C1", "D1"))):
                if f is None:
                    continue
                jac, parts = _field_derivatives(f, kern, t, s, xu, n)
                blocks[a], blocks[bb] = _compress(jac[..., xs]), _compress(jac[..., us])
                blocks[c], blocks[d] = _pair(parts, xs), _pair(parts, us)
            out.append(blocks)
        return out

    def block(self, name, i, j):
        return self.row(i)[j][name]

    def cost_terms(self, i: int):
        """``(a0 + E*c0, b0 + E*d0)`` at node i, each of shape (M, n) / (M, m)."""
        p, n = self.p, self.n
        t = self.grid.nodes[i]
        xu = _local(self.X, self.u, i)
        jac, parts = _field_derivatives(lambda t_, s_, a, gm: p.g(t_, a, gm), p.theta_g, t, t, xu, 1)
        total = jac[:, 0, :]
        if parts is not None:
            L, R = parts
            total = total + np.einsum("r,mrk->mk", L[:, 0, :].mean(axis=0), R)
        return total[:, :n], total[:, n:]

    def present(self) -> set:
        """Names of blocks that are nonzero somewhere on the grid."""
        names = set()
        for i in range(1, self.grid.N + 1):
            for blocks in self.row(i):
                names.update(k for k, v in blocks.items() if v is not None)
        return names


def _zero_pair(n):
    return PairMatrix.constant(np.zeros((n, n)))


def linearised_coeffs(lin: Linearisation, names: set | None = None) -> LinearForwardCoeffs:
    """Linear MF-FSVIE satisfied by the state variation (control part dropped)."""
    n = lin.n
    names = lin.present() if names is None else names

    def local(name):
        if name not in names:
            return None
        return lambda i, j: (lambda v: 0.0 if v is None else v)(lin.block(name, i, j))

    def pair(name):
        if name not in names:
            return None
        return lambda i, j: (lambda v: _zero_pair(n) if v is None else v)(lin.block(name, i, j))

    return LinearForwardCoeffs(n=n, A0=local("A0"), A1=local("A1"), C0=pair("C0"), C1=pair("C1"))


@dataclass
class AdjointSolution:
    solution: MSolutionGrid
    report: PicardReport
    linearisation: Linearisation = field(repr=False)
    psi: np.ndarray = field(repr=False)
    X: np.ndarray = field(repr=False)


def solve_adjoint(u, p: ControlProblem, grid: TimeGrid, ensemble: PathEnsemble, basis: RegressionBasis | None = None,
                  tol: float = 1e-6, max_iter: int = 10, features=None, X: np.ndarray | None = None) -> AdjointSolution:
    """Adjoint MF-BSVIE at ``u``: free term ``-a0 - E*c0`` and the transposed linearised coefficients.

    The free term vanishes at node N because the discrete cost stops at
    ``t_{N-1}``.  When the linearised state equation has no state feedback
    the adjoint is its free term, and only the lower triangle of Z is
    computed (by martingale representation).
    """
    u = check_control(u, p, grid, ensemble.M)
    if X is None:
        X = solve_mf_fsvie(p.forward(), grid, ensemble, control=u).X
    lin = Linearisation(p, grid, X, u)
    M, N, n = ensemble.M, grid.N, p.n
    psi = np.zeros((M, N + 1, n))
    for i in range(N):
        psi[:, i] = -lin.cost_terms(i)[0]
    names = lin.present()
    reg = Regressor(ensemble, basis or RegressionBasis(), features)
    if not names & {"A0", "A1", "C0", "C1"}:
        Z = np.zeros((M, N + 1, N, n))
        residual = complete_lower_triangle(psi, Z, reg)
        sol = MSolutionGrid(psi.copy(), Z, grid, m_residual=residual, m_tolerance=residual * (1 + 1e-9) + 1e-12)
        report = PicardReport(iterations=0, converged=True, final_residual=0.0)
        return AdjointSolution(sol, report, lin, psi, X)
    coeffs = build_fsvie_adjoint(linearised_coeffs(lin, names))
    problem = LinearBackwardProblem(coeffs, lambda i: psi[:, i], name="adjoint")
    sol, report = solve_mf_bsvie_picard(problem, grid, ensemble, tol=tol, max_iter=max_iter, regressor=reg)
    if not report.converged:
        log.warning("adjoint equation did not converge (distance %.3e)", report.final_residual)
    return AdjointSolution(sol, report, lin, psi, X)


# ---------------------------------------------------------------------------
# gradient and certificate
# ---------------------------------------------------------------------------


def _tmatvec(A, v):
    """``A^T v`` for blocks of shape (M|1, n, m) and v of shape (M, n)."""
    return np.einsum("mnk,mn->mk", np.broadcast_to(A, (v.shape[0],) + A.shape[1:]), v)


def gradient_field(u, adjoint: AdjointSolution, p: ControlProblem, grid: TimeGrid, ensemble: PathEnsemble,
                   adapted: bool = False, regressor: Regressor | None = None) -> np.ndarray:
    """The integrand of the variational inequality, shape (M, N + 1, m).

    ``G_j = b0 + E*d0 - dt sum_{i>j} (B0(i,j)^T Y_i + E*[D0^T Y_i] + B1^T Z(i,j) + E*[D1^T Z(i,j)])``.
    The last node carries no control and gets G = 0.  With ``adapted`` the
    field is replaced by its conditional expectation given F_{t_j}.
    """
    lin = adjoint.linearisation
    Y, Z = adjoint.solution.Y, adjoint.solution.Z
    M, N, dt = ensemble.M, grid.N, grid.dt
    G = np.zeros((M, N + 1, p.m))
    for j in range(N):
        G[:, j] = lin.cost_terms(j)[1]
    names = lin.present()
    if names & {"B0", "B1", "D0", "D1"}:
        for i in range(1, N + 1):
            for j, blocks in enumerate(lin.row(i)):
                acc = np.zeros((M, p.m))
                for name, v in (("B0", Y[:, i]), ("B1", Z[:, i, j])):
                    if blocks[name] is not None:
                        acc += _tmatvec(blocks[name], v)
                for name, v in (("D0", Y[:, i]), ("D1", Z[:, i, j])):
                    if blocks[name] is not None:
                        acc += blocks[name].apply_star_transposed(v)
                G[:, j] -= acc * dt
    if adapted:
        reg = regressor or Regressor(ensemble)
        for j in range(N):
            G[:, j] = reg.project(G[:, j], j)
    if not np.all(np.isfinite(G)):
        raise InvalidArgument("gradient field has non-finite values")
    return G


def directional_derivative(G, v, grid: TimeGrid) -> float:
    """``E sum_{j<N} <G_j, v_j> dt``, the first variation of the discrete cost along v."""
    v = np.asarray(v, dtype=float)
    return float(np.einsum("mjk,mjk->", G[:, :grid.N], np.broadcast_to(v, G.shape)[:, :grid.N]) * grid.dt / G.shape[0])


def variational_certificate(u, G, lower, upper) -> float:
    """Average over particles and nodes of ``min_{v in U} <G, v - u>``.

    The box minimum is taken coordinatewise at the bound selected by the sign
    of G.  Zero means first-order optimal; negative values measure the
    violation.  Callers pass only the nodes that carry a control.
    """
    u = np.asarray(u, dtype=float)
    G = np.asarray(G, dtype=float)
    lo = np.broadcast_to(lower, u.shape)
    hi = np.broadcast_to(upper, u.shape)
    pointwise = np.minimum(G * (lo - u), G * (hi - u)).sum(axis=-1)
    return float(pointwise.mean())


def gradient_scale(G, grid: TimeGrid) -> float:
    return float(np.sqrt(np.mean(G[:, :grid.N] ** 2)))


# ---------------------------------------------------------------------------
# parameterisations and projected gradient
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PiecewiseConstant:
    """Deterministic controls constant on ``pieces`` equal blocks of nodes 0..N-1."""

    grid: TimeGrid
    pieces: int

    def __post_init__(self):
        if not 1 <= self.pieces <= self.grid.N:
            raise InvalidArgument(f"pieces must lie in 1..{self.grid.N}")

    @property
    def labels(self) -> np.ndarray:
        """Piece index of every node; the last node joins the last piece."""
        idx = np.minimum(np.arange(self.grid.N + 1) * self.pieces // self.grid.N, self.pieces - 1)
        return idx

    def field(self, theta, M: int) -> np.ndarray:
        theta = np.asarray(theta, dtype=float).reshape(self.pieces, -1)
        return np.broadcast_to(theta[self.labels], (M, self.grid.N + 1, theta.shape[1])).copy()

    def reduce(self, G) -> np.ndarray:
        """Particle- and time-average of G over each piece (nodes 0..N-1)."""
        lab = self.labels[:self.grid.N]
        g = G[:, :self.grid.N].mean(axis=0)
        return np.stack([g[lab == k].mean(axis=0) for k in range(self.pieces)])

    def weights(self) -> np.ndarray:
        lab = self.labels[:self.grid.N]
        return np.array([(lab == k).mean() for k in range(self.pieces)])


@dataclass(frozen=True)
class StepRule:
    """Backtracking Armijo rule on the common-random-number cost estimate."""

    alpha0: float = 1.0
    shrink: float = 0.5
    grow: float = 2.0
    armijo: float = 1e-4
    max_backtrack: int = 30


@dataclass
class OptimizationResult:
    u: np.ndarray = field(repr=False)
    J: float
    se: float
    certificate: float
    scale: float
    iterations: int
    converged: bool
    theta: np.ndarray | None = None
    trace: list = field(default_factory=list)

    @property
    def certified(self) -> bool:
        return self.certificate >= -1e-2 * self.scale

    def trace_rows(self):
        return [dict(zip(("iteration", "J", "SE", "step", "certificate"), row)) for row in self.trace]


class _Evaluator:
    """Cost, adjoint and gradient at a control with one fixed ensemble."""

    def __init__(self, p, grid, ensemble, basis, features, tol, max_iter):
        self.p, self.grid, self.ens = p, grid, ensemble
        self.basis, self.features, self.tol, self.max_iter = basis, features, tol, max_iter
        self._reg = None

    def cost(self, u):
        X = solve_mf_fsvie(self.p.forward(), self.grid, self.ens, control=u).X
        samples = cost_samples(u, self.p, self.grid, self.ens, X)
        return float(samples.mean()), float(standard_error(samples)), X

    def gradient(self, u, X, adapted):
        adj = solve_adjoint(u, self.p, self.grid, self.ens, self.basis, self.tol, self.max_iter, self.features, X)
        if adapted and self._reg is None:
            self._reg = Regressor(self.ens, self.basis or RegressionBasis(), self.features)
        return gradient_field(u, adj, self.p, self.grid, self.ens, adapted=adapted, regressor=self._reg)


def optimize(p: ControlProblem, init, grid: TimeGrid, ensemble: PathEnsemble, step: StepRule = StepRule(),
             tol: float = 1e-3, max_iter: int = 50, parameterisation: PiecewiseConstant | None = None,
             basis: RegressionBasis | None = None, features=None, adjoint_tol: float = 1e-6,
             adjoint_max_iter: int = 10) -> OptimizationResult:
    """Projected gradient descent with Armijo backtracking on a fixed ensemble.

    ``init`` is a control field (M, N + 1, m), or the parameter array
    (pieces, m) when a parameterisation is given.  Stops once the
    certificate reaches ``-tol * scale`` where ``scale`` is the RMS of the
    gradient at the initial control.  An accepted step always lowers the
    sample cost, so the common-random-number estimate decreases
    monotonically.
    """
    ev = _Evaluator(p, grid, ensemble, basis, features, adjoint_tol, adjoint_max_iter)
    M, N, dt = ensemble.M, grid.N, grid.dt
    lo, hi = p.lower, p.upper
    par = parameterisation
    if par is not None:
        theta = project_onto_U(np.asarray(init, dtype=float).reshape(par.pieces, p.m), lo, hi)
        u = par.field(theta, M)
    else:
        theta = None
        u = check_control(init, p, grid, M).copy()
    u = project_onto_U(u, lo, hi)

    def certificate(u_, th_, G_):
        if par is None:
            return variational_certificate(u_[:, :N], G_[:, :N], lo, hi)
        g = par.reduce(G_)
        pieces = np.minimum(g * (lo - th_), g * (hi - th_)).sum(axis=-1)
        return float(pieces @ par.weights())

    J, se, X = ev.cost(u)
    G = ev.gradient(u, X, adapted=par is None)
    scale = max(gradient_scale(G, grid), np.finfo(float).tiny)
    cert = certificate(u, theta, G)
    alpha = step.alpha0
    trace = [(0, J, se, 0.0, cert)]
    converged = cert >= -tol * scale
    it = 0
    while not converged and it < max_iter:
        it += 1
        direction = par.reduce(G) if par is not None else G
        accepted = False
        for _ in range(step.max_backtrack):
            if par is not None:
                th_new = project_onto_U(theta - alpha * direction, lo, hi)
                u_new = par.field(th_new, M)
            else:
                th_new = None
                u_new = u.copy()
                u_new[:, :N] = project_onto_U(u[:, :N] - alpha * G[:, :N], lo, hi)
            slope = directional_derivative(G, u_new - u, grid)
            if slope >= 0:
                break  # projected step is not a descent direction: stationary to working precision
            J_new, se_new, X_new = ev.cost(u_new)
            if J_new <= J + step.armijo * slope:
                accepted = True
                break
            alpha *= step.shrink
        if not accepted:
            log.info("line search found no decrease at iteration %d; stopping", it)
            break
        u, theta, J, se, X = u_new, th_new, J_new, se_new, X_new
        G = ev.gradient(u, X, adapted=par is None)
        cert = certificate(u, theta, G)
        trace.append((it, J, se, alpha, cert))
        log.debug("iteration %d: J=%.6g step=%.3g certificate=%.3e", it, J, alpha, cert)
        converged = cert >= -tol * scale
        alpha = min(alpha * step.grow, step.alpha0 * 1e3)
    if not converged:
        log.warning("projected gradient stopped without certificate (%.3e, scale %.3e)", cert, scale)
    return OptimizationResult(u=u, J=J, se=se, certificate=cert, scale=scale, iterations=it, converged=converged,
                              theta=theta, trace=trace)


def brute_force_piecewise(p: ControlProblem, par: PiecewiseConstant, grid: TimeGrid, ensemble: PathEnsemble,
                          levels: int = 41):
    """Exhaustive search over ``levels`` values per piece and control component.

    Returns ``(theta, J, se, table)`` with ``table`` of shape
    (levels,) * (pieces * m).  Without interaction the candidates are
    independent, so they are simulated side by side as one large ensemble
    (each candidate reuses the same Brownian increments).
    """
    axes = [np.linspace(lo, hi, levels) for lo, hi in zip(np.tile(p.lower, par.pieces), np.tile(p.upper, par.pieces))]
    combos = np.array(list(itertools.product(*axes)))  # (K, pieces * m)
    K, M = combos.shape[0], ensemble.M
    if not p.interacting:
        big = PathEnsemble(grid, K * M, ensemble.seed, np.tile(ensemble.dW, (K, 1)))
        u = np.concatenate([par.field(c, M) for c in combos])
        samples = cost_samples(u, p, grid, big).reshape(K, M)
    else:
        samples = np.stack([cost_samples(par.field(c, M), p, grid, ensemble) for c in combos])
    means = samples.mean(axis=1)
    ses = standard_error(samples, axis=1) if M > 1 else np.zeros(K)
    best = int(np.argmin(means))
    table = means.reshape((levels,) * combos.shape[1])
    return combos[best].reshape(par.pieces, p.m), float(means[best]), float(ses[best]), table


def grid_resolution(table) -> float:
    """Largest cost change between the brute-force minimiser and its grid neighbours."""
    idx = np.unravel_index(int(np.argmin(table)), table.shape)
    best = table[idx]
    worst = 0.0
    for shift in itertools.product((-1, 0, 1), repeat=table.ndim):
        nb = tuple(min(max(a + d, 0), s - 1) for a, d, s in zip(idx, shift, table.shape))
        worst = max(worst, abs(table[nb] - best))
    return float(worst)


# ---------------------------------------------------------------------------
# the bounded-derivative linear-quadratic toy
# ---------------------------------------------------------------------------


def lq_toy(lower: float = -1.0, upper: float = 1.0) -> ControlProblem:
    """n = m = 1, X(t) = 1 + int_0^t u ds, running cost x tanh(x) + u^2."""

    def b(t, s, xu, gam):
        return xu[:, 1:2]

    def g(t, xu, gam):
        x, u = xu[:, 0], xu[:, 1]
        return x * np.tanh(x) + u ** 2

    return ControlProblem(n=1, m=1, phi=lambda i: 1.0, g=g, lower=[lower], upper=[upper], b=b, name="lq-toy")


def lq_toy_cost(u_nodes, grid: TimeGrid) -> float:
    """Direct quadrature of the toy cost for a deterministic control on the nodes."""
    u_nodes = np.asarray(u_nodes, dtype=float)
    x = 1.0 + np.concatenate([[0.0], np.cumsum(u_nodes[:grid.N]) * grid.dt])
    return float(np.sum(x[:grid.N] * np.tanh(x[:grid.N]) + u_nodes[:grid.N] ** 2) * grid.dt)
