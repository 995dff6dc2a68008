"""Adapted M-solutions of mean-field backward SVIEs.

Each Picard step freezes ``(Y(s), Z(s, t))`` and, for every node ``t_i``,
solves a backward sweep for ``Z(t_i, .)`` on the upper triangle by
least-squares regression; the lower triangle then follows from the
martingale representation of ``Y(t_i)``.

Quadrature: the ds-integral over ``[t_i, T]`` uses the right endpoints
``t_{r+1}``, r = i..N-1.  This is the exact transpose of the left-endpoint
forward Euler sum, so discrete duality pairings hold without an O(dt)
mismatch between the two sides.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import (DivergedSimulation, InvalidArgument, InvalidProblem, MSolutionGrid, PairKernel, PairMatrix,
                   PathEnsemble, RegressionBasis, Regressor, TimeGrid, as_matrix_field, as_particle_array,
                   complete_lower_triangle, m_distance, pair_average)
from .forward import DIVERGENCE_BOUND, matvec

log = logging.getLogger(__name__)

ALL_SLOTS = frozenset({"y", "z", "zhat", "gamma"})


@dataclass
class BackwardProblem:
    """Y(t) = psi(t) + int_t^T g(t, s, Y(s), Z(t,s), Z(s,t), Gamma) ds - int_t^T Z(t,s) dW(s).

    ``psi(i)`` returns the (possibly F_T-measurable) free term at node i as a
    scalar, (n,) or (M, n) array.  ``g(t, s, y, z, zhat, gamma)`` receives
    (M, n) arrays; ``gamma`` is the particle average of ``theta`` over the
    concatenated state ``(y, z, zhat)`` or ``None``.  ``depends_on`` declares
    which slots ``g`` actually uses.
    """

    n: int
    psi: Callable
    g: Callable | None = None
    theta: PairKernel | None = None
    depends_on: frozenset = ALL_SLOTS
    q: float = 2.0
    name: str = ""

    def drive(self, s: int, K: int, grid: TimeGrid, frozen: MSolutionGrid, zeta: np.ndarray) -> np.ndarray:
        """Generator values at s-node ``s`` for rows i = 0..K-1, shape (M, K, n)."""
        M = zeta.shape[0]
        out = np.zeros((M, K, self.n))
        if self.g is None:
            return out
        nodes = grid.nodes
        y = frozen.Y[:, s]
        for i in range(K):
            z, zhat = zeta[:, i], frozen.Z[:, s, i]
            gam = None
            if self.theta is not None:
                gam = pair_average(self.theta, "prime", nodes[i], nodes[s], np.concatenate([y, z, zhat], axis=1))
            out[:, i] = self.g(nodes[i], nodes[s], y, z, zhat, gam)
        return out


@dataclass
class LinearBackwardCoeffs:
    """Coefficients of the linear MF-BSVIE indexed by nodes (i, j), i <= j.

    Local blocks ``A0, B0, C0`` return scalars, (n, n) or (M, n, n) arrays;
    pair blocks ``A1, B1, C1`` return :class:`PairMatrix` objects (or a
    constant matrix).  They multiply Y(s), Z(t, s) and Z(s, t) respectively.
    """

    n: int
    A0: Callable | None = None
    B0: Callable | None = None
    C0: Callable | None = None
    A1: Callable | None = None
    B1: Callable | None = None
    C1: Callable | None = None
    bound: float | None = None
    path_dependent: frozenset = frozenset()

    def local(self, name, i, j, M):
        f = getattr(self, name)
        if f is None:
            return None
        return as_matrix_field(f(i, j), M, self.n)

    def pair(self, name, i, j):
        f = getattr(self, name)
        if f is None:
            return None
        v = f(i, j)
        if isinstance(v, PairMatrix):
            return v
        return PairMatrix.constant(np.eye(self.n) * float(v) if np.ndim(v) == 0 else v)


class LinearBackwardProblem(BackwardProblem):
    def __init__(self, c: LinearBackwardCoeffs, psi: Callable, name: str = "linear"):
        slots = set()
        if c.A0 is not None or c.A1 is not None:
            slots.add("y")
        if c.B0 is not None or c.B1 is not None:
            slots.add("z")
        if c.C0 is not None or c.C1 is not None:
            slots.add("zhat")
        super().__init__(n=c.n, psi=psi, g=None, theta=None, depends_on=frozenset(slots), name=name)
        self.coeffs = c

    def drive(self, s, K, grid, frozen, zeta):
        c = self.coeffs
        M = zeta.shape[0]
        out = np.zeros((M, K, self.n))
        y = frozen.Y[:, s]
        zhat = frozen.Z[:, s, :K]
        for name, v in (("A0", None), ("B0", zeta), ("C0", zhat)):
            if getattr(c, name) is None:
                continue
            blocks = [c.local(name, i, s, M) for i in range(K)]
            if all(b.shape[0] == 1 for b in blocks):
                A = np.stack([b[0] for b in blocks])
            else:
                A = np.stack([np.broadcast_to(b, (M, self.n, self.n)) for b in blocks], axis=1)
            x = y[:, None, :] if v is None else v
            out += matvec(A, x)
        means = {"A1": None, "B1": None, "C1": None}
        for i in range(K):
            acc = out[:, i]
            for name, v in (("A1", y), ("B1", zeta[:, i]), ("C1", zhat[:, i])):
                P = c.pair(name, i, s)
                if P is None:
                    continue
                if P.factorizes_on_mean:
                    if means[name] is None:
                        src = {"A1": y[:, None], "B1": zeta, "C1": zhat}[name]
                        means[name] = src.mean(axis=0)
                    acc += P.apply_to_mean(means[name][0 if name == "A1" else i], M)
                else:
                    acc += P.apply_prime(v)
        return out


def linear_backward_as_problem(c: LinearBackwardCoeffs, psi: Callable, grid: TimeGrid) -> BackwardProblem:
    """Generic encoding: g = A0 y + B0 z + C0 zhat + gamma with a separable theta."""
    n = c.n

    def node(t):
        return grid.index_of(t)

    def g(t, s, y, z, zhat, gamma):
        out = np.zeros_like(y)
        for name, v in (("A0", y), ("B0", z), ("C0", zhat)):
            A = c.local(name, node(t), node(s), y.shape[0])
            if A is not None:
                out = out + matvec(A, v)
        return out if gamma is None else out + gamma

    names = [nm for nm in ("A1", "B1", "C1") if getattr(c, nm) is not None]
    theta = None
    if names:
        slot = {"A1": 0, "B1": 1, "C1": 2}

        def left(t, s, x):
            Ls = [c.pair(nm, node(t), node(s)).L for nm in names]
            return np.concatenate([np.broadcast_to(L, (x.shape[0],) + L.shape[1:]) for L in Ls], axis=-1)

        def right(t, s, xp):
            parts = []
            for nm in names:
                R = c.pair(nm, node(t), node(s)).R
                v = xp[:, slot[nm] * n:(slot[nm] + 1) * n]
                parts.append(np.einsum("mrb,mb->mr", np.broadcast_to(R, (xp.shape[0],) + R.shape[1:]), v))
            return np.concatenate(parts, axis=-1)

        theta = PairKernel(dim=n, left=left, right=right)
    return BackwardProblem(n=n, psi=psi, g=g, theta=theta, name="linear-generic")


# ---------------------------------------------------------------------------
# solvers
# ---------------------------------------------------------------------------


def psi_values(p: BackwardProblem, grid: TimeGrid, M: int) -> np.ndarray:
    out = np.empty((M, grid.N + 1, p.n))
    for i in range(grid.N + 1):
        out[:, i] = as_particle_array(p.psi(i), M, p.n)
    return out


def _make_regressor(ensemble, basis, features, regressor):
    if regressor is not None:
        return regressor
    return Regressor(ensemble, basis or RegressionBasis(), features)


def solve_inner_bsvie(frozen: MSolutionGrid, p: BackwardProblem, grid: TimeGrid, ensemble: PathEnsemble,
                      basis: RegressionBasis | None = None, features=None, regressor: Regressor | None = None,
                      psi: np.ndarray | None = None) -> MSolutionGrid:
    """One application of the Picard map: solve for (Y, Z) with (y, zhat) frozen.

    All rows i share the conditioning node at each backward step r, so the
    sweeps are batched: ``eta[:, i]`` holds the running value of row i.
    """
    if ensemble.grid != grid:
        raise InvalidArgument("ensemble was sampled on a different grid")
    reg = _make_regressor(ensemble, basis, features, regressor)
    M, N, n, dt = ensemble.M, grid.N, p.n, grid.dt
    dW = ensemble.dW
    eta = psi_values(p, grid, M) if psi is None else psi.copy()
    Y = np.empty((M, N + 1, n))
    Z = np.zeros((M, N + 1, N, n))
    Y[:, N] = eta[:, N]
    for r in range(N - 1, -1, -1):
        K = r + 1
        rows = range(K)
        act = eta[:, :K]
        P = reg.project_rows(act, r, rows)
        zeta = reg.project_rows((act - P) * dW[:, r, None, None], r, rows) / dt
        Z[:, :K, r] = zeta
        drive = p.drive(r + 1, K, grid, frozen, zeta)
        new = P + reg.project_rows(drive, r, rows) * dt
        bad = ~np.isfinite(new) | (np.abs(new) > DIVERGENCE_BOUND)
        if bad.any():
            idx = np.argwhere(bad)[0]
            raise DivergedSimulation(f"backward sweep diverged at node {idx[1]} (s-step {r}), particle {idx[0]}",
                                     node=int(idx[1]), particle=int(idx[0]))
        eta[:, :K] = new
        Y[:, r] = eta[:, r]
    residual = complete_lower_triangle(Y, Z, reg)
    tol = residual * (1 + 1e-9) + 1e-12
    return MSolutionGrid(Y, Z, grid, m_residual=residual, m_tolerance=tol)


@dataclass
class PicardReport:
    iterations: int = 0
    distances: list = field(default_factory=list)
    betas: list = field(default_factory=list)
    beta: float = 0.0
    converged: bool = False
    final_residual: float = float("nan")

    @property
    def ratios(self):
        d = self.distances
        return [d[k + 1] / d[k] if d[k] > 0 else 0.0 for k in range(len(d) - 1)]

    def geometric_from(self, start: int = 2, slack: float = 0.1, floor: float = 0.0) -> bool:
        """True when distances from iteration ``start`` (1-based) on shrink by a ratio below 1 + slack.

        Distances already below ``floor`` count as converged noise.
        """
        d = self.distances
        for k in range(start - 1, len(d) - 1):
            if d[k + 1] <= floor:
                continue
            if d[k + 1] >= (1 + slack) * d[k]:
                return False
        return True


def solve_mf_bsvie_picard(p: BackwardProblem, grid: TimeGrid, ensemble: PathEnsemble,
                          basis: RegressionBasis | None = None, tol: float = 1e-6, max_iter: int = 10,
                          beta: float = 0.0, features=None, regressor: Regressor | None = None,
                          auto_beta: bool = True) -> tuple[MSolutionGrid, PicardReport]:
    """Picard iteration from the zero pair in the discrete M^2_beta norm.

    If successive distances stall (ratio above 0.9) the weight beta is doubled
    (0 -> 2 -> 4 -> 8).  Non-convergence is reported, not raised.
    """
    if tol <= 0 or max_iter < 1:
        raise InvalidArgument("tol must be positive and max_iter at least 1")
    reg = _make_regressor(ensemble, basis, features, regressor)
    psi = psi_values(p, grid, ensemble.M)
    cur = MSolutionGrid.zeros(ensemble.M, grid, p.n)
    report = PicardReport(beta=beta)
    for k in range(max_iter):
        new = solve_inner_bsvie(cur, p, grid, ensemble, regressor=reg, psi=psi)
        d = float(np.sqrt(m_distance(new, cur, report.beta)))
        report.distances.append(d)
        report.betas.append(report.beta)
        report.iterations = k + 1
        cur = new
        log.debug("picard iteration %d: distance %.3e (beta %g)", k + 1, d, report.beta)
        if d < tol:
            report.converged = True
            break
        if auto_beta and k >= 2 and d > 0.9 * report.distances[-2] and report.beta < 8:
            report.beta = 2.0 if report.beta == 0 else 2 * report.beta
            log.info("picard distances stalled; raising beta to %g", report.beta)
    report.final_residual = report.distances[-1]
    if not report.converged:
        log.warning("picard iteration stopped after %d iterations, distance %.3e", report.iterations,
                    report.final_residual)
    return cur, report


def solve_linear_bsvie(c: LinearBackwardCoeffs, psi: Callable, grid: TimeGrid, ensemble: PathEnsemble,
                       basis: RegressionBasis | None = None, tol: float = 1e-6, max_iter: int = 10, beta: float = 0.0,
                       features=None, regressor: Regressor | None = None):
    return solve_mf_bsvie_picard(LinearBackwardProblem(c, psi), grid, ensemble, basis, tol, max_iter, beta,
                                 features=features, regressor=regressor)


# ---------------------------------------------------------------------------
# oracles and diagnostics
# ---------------------------------------------------------------------------


def deterministic_volterra_solve(k: Callable, f: Callable, grid: TimeGrid) -> np.ndarray:
    """Solve y(t) = f(t) + int_t^T k(t, s) y(s) ds on the grid.

    Trapezoid rule in s with back-substitution; the diagonal weight makes
    each step implicit with pivot ``I - dt/2 k(t_i, t_i)``.  Returns (N+1, n).
    """
    N, dt = grid.N, grid.dt
    f0 = np.atleast_1d(np.asarray(f(0), dtype=float))
    n = f0.shape[0]

    def K(i, j):
        v = np.asarray(k(i, j), dtype=float)
        return v * np.eye(n) if v.ndim == 0 else np.atleast_2d(v)

    y = np.zeros((N + 1, n))
    y[N] = np.atleast_1d(np.asarray(f(N), dtype=float))
    for i in range(N - 1, -1, -1):
        rhs = np.atleast_1d(np.asarray(f(i), dtype=float)).copy()
        for j in range(i + 1, N + 1):
            w = 0.5 if j == N else 1.0
            rhs += w * dt * (K(i, j) @ y[j])
        pivot = np.eye(n) - 0.5 * dt * K(i, i)
        if abs(np.linalg.det(pivot)) < 1e-14:
            raise InvalidProblem(f"singular pivot at node {i}")
        y[i] = np.linalg.solve(pivot, rhs)
    return y


@dataclass
class MConditionReport:
    residual: np.ndarray
    tolerance: np.ndarray
    relative: np.ndarray
    flagged: list

    @property
    def passed(self) -> bool:
        return not self.flagged


def verify_m_condition(sol: MSolutionGrid, ensemble: PathEnsemble, tolerance=None) -> MConditionReport:
    """Per-node mean-square residual of Y(t_i) = E Y(t_i) + sum_{j<i} Z(t_i, t_j) dW_j."""
    N = sol.grid.N
    res = np.zeros(N + 1)
    var = np.zeros(N + 1)
    for i in range(N + 1):
        Yi = sol.Y[:, i]
        recon = Yi.mean(axis=0) + np.einsum("mjn,mj->mn", sol.Z[:, i, :i], ensemble.dW[:, :i])
        res[i] = float(np.mean(np.sum((Yi - recon) ** 2, axis=1)))
        var[i] = float(np.mean(np.sum((Yi - Yi.mean(axis=0)) ** 2, axis=1)))
    if tolerance is None:
        tolerance = sol.m_tolerance if sol.m_tolerance is not None else 1e-12 + 1e-10 * var
    tol = np.broadcast_to(np.asarray(tolerance, dtype=float), res.shape)
    rel = np.where(var > 0, res / np.where(var > 0, var, 1.0), 0.0)
    flagged = [i for i in range(N + 1) if res[i] > tol[i]]
    return MConditionReport(res, np.array(tol), rel, flagged)


# ---------------------------------------------------------------------------
# examples
# ---------------------------------------------------------------------------


def example_3_3(grid: TimeGrid, ensemble: PathEnsemble, psi1: Callable = lambda s: s):
    """Y(t) = psi + int_t^T Z(s,t) ds - int_t^T Z(t,s) dW, psi = int_0^T psi1 dW.

    Returns the problem and the regression features (W, int_0^t psi1 dW),
    the Markov state in which every conditional expectation is polynomial.
    """
    S = ensemble.ito_integral(np.broadcast_to(psi1(grid.nodes[:-1]), (ensemble.M, grid.N)))
    terminal = S[:, -1:].copy()
    p = BackwardProblem(n=1, psi=lambda i: terminal, g=lambda t, s, y, z, zhat, gam: zhat,
                        depends_on=frozenset({"zhat"}), name="example-3.3")
    features = np.stack([ensemble.W, S], axis=2)
    return p, features


def closed_form_example_3_3(grid: TimeGrid, ensemble: PathEnsemble, psi1: Callable = lambda s: s):
    t = grid.nodes
    S = ensemble.ito_integral(np.broadcast_to(psi1(t[:-1]), (ensemble.M, grid.N)))
    Y = S + psi1(t) * (grid.T - t)
    Z = np.broadcast_to(psi1(t[:-1]), (grid.N + 1, grid.N))
    return Y, Z


def example_5_10(grid: TimeGrid):
    """The two deterministic equations Y0 = -int Y0 ds and Y1 = t - int Y1 ds."""
    nodes = grid.nodes
    gen = lambda t, s, y, z, zhat, gam: -y
    p0 = BackwardProblem(n=1, psi=lambda i: 0.0, g=gen, depends_on=frozenset({"y"}), name="example-5.10-Y0")
    p1 = BackwardProblem(n=1, psi=lambda i: nodes[i], g=gen, depends_on=frozenset({"y"}), name="example-5.10-Y1")
    return p0, p1


def closed_form_example_5_10(t, T):
    t = np.asarray(t, dtype=float)
    return np.zeros_like(t), np.exp(t - T) * (T + 1) - 1
