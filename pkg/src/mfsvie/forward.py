"""Interacting-particle Euler schemes for mean-field forward SVIEs."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import (DivergedSimulation, InvalidArgument, PairKernel, PairMatrix, PathEnsemble, TimeGrid,
                   UnsupportedStructure, as_matrix_field, as_particle_array, pair_average)

DIVERGENCE_BOUND = 1e12


@dataclass
class ForwardProblem:
    """X(t) = phi(t) + int_0^t b(t,s,X,Gamma^b) ds + int_0^t sigma(t,s,X,Gamma^sigma) dW.

    ``phi(i)`` is evaluated at node indices and may return a scalar, an
    (n,) vector or an (M, n) array of per-particle values.  ``b`` and
    ``sigma`` are called as ``f(t, s, x, gamma)`` with ``x`` of shape (M, k)
    (the local state, k = n unless a control is appended) and ``gamma`` the
    particle average of the matching kernel, or ``None`` without a kernel.
    """

    n: int
    phi: Callable
    b: Callable | None = None
    sigma: Callable | None = None
    theta_b: PairKernel | None = None
    theta_sigma: PairKernel | None = None
    hypotheses: frozenset = frozenset()
    name: str = ""


@dataclass(eq=False)
class StateGrid:
    X: np.ndarray
    grid: TimeGrid
    ensemble: PathEnsemble
    meta: dict = field(default_factory=dict)

    @property
    def mean(self):
        return self.X.mean(axis=0)

    @property
    def sd(self):
        return self.X.std(axis=0, ddof=1) if self.X.shape[0] > 1 else np.zeros(self.X.shape[1:])

    @property
    def se(self):
        return self.sd / np.sqrt(self.X.shape[0])

    def summary_rows(self):
        rows = []
        mean, sd = self.mean, self.sd
        lo, hi = self.X.min(axis=0), self.X.max(axis=0)
        for i, t in enumerate(self.grid.nodes):
            for k in range(self.X.shape[2]):
                rows.append({"i": i, "t": t, "component": k, "mean": mean[i, k], "sd": sd[i, k],
                             "min": lo[i, k], "max": hi[i, k]})
        return rows


def _check_ensemble(grid: TimeGrid, ensemble: PathEnsemble):
    if ensemble.grid != grid:
        raise InvalidArgument("ensemble was sampled on a different grid")


def _guard(values: np.ndarray, i: int):
    bad = ~np.isfinite(values) | (np.abs(values) > DIVERGENCE_BOUND)
    if bad.any():
        m = int(np.argwhere(bad.reshape(values.shape[0], -1).any(axis=1))[0, 0])
        raise DivergedSimulation(f"state diverged at node {i}, particle {m}", node=i, particle=m)


def solve_mf_fsvie(p: ForwardProblem, grid: TimeGrid, ensemble: PathEnsemble,
                   control: np.ndarray | None = None) -> StateGrid:
    """Euler scheme with the full Volterra sum recomputed at every node.

    ``control`` (shape (M, N + 1, k)) is appended to the local state handed to
    ``b``, ``sigma`` and the kernels.
    """
    _check_ensemble(grid, ensemble)
    M, N, n, dt = ensemble.M, grid.N, p.n, grid.dt
    t_nodes = grid.nodes
    dW = ensemble.dW
    X = np.empty((M, N + 1, n))

    def local(j):
        return X[:, j] if control is None else np.concatenate([X[:, j], control[:, j]], axis=1)

    X[:, 0] = as_particle_array(p.phi(0), M, n)
    _guard(X[:, 0], 0)
    cache = [local(0)]
    for i in range(1, N + 1):
        t = t_nodes[i]
        acc = as_particle_array(p.phi(i), M, n)
        for j in range(i):
            s = t_nodes[j]
            xj = cache[j]
            if p.b is not None:
                gam = pair_average(p.theta_b, "prime", t, s, xj) if p.theta_b is not None else None
                acc += np.asarray(p.b(t, s, xj, gam), dtype=float) * dt
            if p.sigma is not None:
                gam = pair_average(p.theta_sigma, "prime", t, s, xj) if p.theta_sigma is not None else None
                acc += np.asarray(p.sigma(t, s, xj, gam), dtype=float) * dW[:, j, None]
        _guard(acc, i)
        X[:, i] = acc
        cache.append(local(i))
    return StateGrid(X, grid, ensemble, {"dt": dt, "M": M, "seed": ensemble.seed, "scheme": "euler"})


# ---------------------------------------------------------------------------
# linear equations
# ---------------------------------------------------------------------------


@dataclass
class LinearForwardCoeffs:
    """Coefficients of the linear MF-FSVIE, all indexed by nodes (i, j), i >= j.

    ``A0(i, j)``/``A1(i, j)`` return a scalar, an (n, n) matrix or a per-particle
    (M, n, n) array; ``C0(i, j)``/``C1(i, j)`` return a :class:`PairMatrix` (or
    anything :meth:`PairMatrix.constant` accepts).  ``None`` means zero.
    ``path_dependent`` names the blocks whose values depend on the path.
    """

    n: int
    A0: Callable | None = None
    A1: Callable | None = None
    C0: Callable | None = None
    C1: Callable | None = None
    bound: float | None = None
    path_dependent: frozenset = frozenset()

    def pair(self, name, i, j):
        f = getattr(self, name)
        if f is None:
            return None
        v = f(i, j)
        return v if isinstance(v, PairMatrix) else PairMatrix.constant(np.broadcast_to(v, (self.n, self.n)) if np.ndim(v) == 0 else v)

    def local(self, name, i, j, M):
        f = getattr(self, name)
        if f is None:
            return None
        return as_matrix_field(f(i, j), M, self.n)


def matvec(A: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.matmul(A, x[..., None])[..., 0]


def solve_linear_fsvie(c: LinearForwardCoeffs, phi: Callable, grid: TimeGrid, ensemble: PathEnsemble) -> StateGrid:
    _check_ensemble(grid, ensemble)
    M, N, n, dt = ensemble.M, grid.N, c.n, grid.dt
    dW = ensemble.dW
    X = np.empty((M, N + 1, n))
    X[:, 0] = as_particle_array(phi(0), M, n)
    _guard(X[:, 0], 0)
    for i in range(1, N + 1):
        acc = as_particle_array(phi(i), M, n)
        for j in range(i):
            xj = X[:, j]
            A0, C0 = c.local("A0", i, j, M), c.pair("C0", i, j)
            if A0 is not None or C0 is not None:
                drift = np.zeros((M, n))
                if A0 is not None:
                    drift = drift + matvec(A0, xj)
                if C0 is not None:
                    drift = drift + C0.apply_prime(xj)
                acc += drift * dt
            A1, C1 = c.local("A1", i, j, M), c.pair("C1", i, j)
            if A1 is not None or C1 is not None:
                diff = np.zeros((M, n))
                if A1 is not None:
                    diff = diff + matvec(A1, xj)
                if C1 is not None:
                    diff = diff + C1.apply_prime(xj)
                acc += diff * dW[:, j, None]
        _guard(acc, i)
        X[:, i] = acc
    return StateGrid(X, grid, ensemble, {"dt": dt, "M": M, "seed": ensemble.seed, "scheme": "euler-linear"})


def linear_as_problem(c: LinearForwardCoeffs, phi: Callable, grid: TimeGrid) -> ForwardProblem:
    """Encode a linear equation as a generic problem: b = A0 x + gamma, theta^b = C0 x'."""
    n = c.n

    def node(t):
        return grid.index_of(t)

    def pair_kernel(name):
        if getattr(c, name) is None:
            return None

        def left(t, s, x):
            P = c.pair(name, node(t), node(s))
            if P.dense is not None:
                raise UnsupportedStructure("dense pair coefficients have no separable generic encoding")
            return P.L

        def right(t, s, xp):
            P = c.pair(name, node(t), node(s))
            return np.einsum("mrb,mb->mr", np.broadcast_to(P.R, (xp.shape[0],) + P.R.shape[1:]), xp)

        return PairKernel(dim=n, left=left, right=right)

    def field_fn(A_name, C_name):
        if getattr(c, A_name) is None and getattr(c, C_name) is None:
            return None

        def f(t, s, x, gamma):
            out = np.zeros((x.shape[0], n))
            if getattr(c, A_name) is not None:
                out = out + matvec(as_matrix_field(getattr(c, A_name)(node(t), node(s)), x.shape[0], n), x)
            if gamma is not None:
                out = out + gamma
            return out

        return f

    return ForwardProblem(n=n, phi=phi, b=field_fn("A0", "C0"), sigma=field_fn("A1", "C1"),
                          theta_b=pair_kernel("C0"), theta_sigma=pair_kernel("C1"), name="linear")


# ---------------------------------------------------------------------------
# closed-form examples
# ---------------------------------------------------------------------------


def example_5_2_problem() -> ForwardProblem:
    """X(t) = 1 + int_0^t E[X(s)] dW(s)."""
    kernel = PairKernel(dim=1, left=lambda t, s, x: np.ones(x.shape[:-1] + (1, 1)),
                        right=lambda t, s, xp: xp)
    return ForwardProblem(n=1, phi=lambda i: 1.0, sigma=lambda t, s, x, g: g, theta_sigma=kernel,
                          hypotheses=frozenset({"H1", "H2"}), name="example-5.2")


def closed_form_example_5_2(grid: TimeGrid, ensemble: PathEnsemble) -> StateGrid:
    return StateGrid((1.0 + ensemble.W)[:, :, None], grid, ensemble, {"scheme": "closed-form"})


def example_5_4(b: float, sigma: float, grid: TimeGrid) -> ForwardProblem:
    """X(t) = T - t + int_0^t b X ds + int_0^t sigma X dW."""
    nodes, T = grid.nodes, grid.T
    return ForwardProblem(
        n=1,
        phi=lambda i: T - nodes[i],
        b=(lambda t, s, x, g: b * x) if b != 0 else None,
        sigma=(lambda t, s, x, g: sigma * x) if sigma != 0 else None,
        hypotheses=frozenset({"H1", "H2"}),
        name="example-5.4",
    )


def closed_form_example_5_4(b: float, sigma: float, grid: TimeGrid, ensemble: PathEnsemble) -> StateGrid:
    """Closed-form solution of the Example 5.4 equation.

    With ``sigma == 0`` the inner integral is evaluated exactly; otherwise a
    left-endpoint sum over the grid is used.
    """
    t = grid.nodes
    T = grid.T
    if sigma == 0:
        if b == 0:
            X = np.broadcast_to(T - t, (ensemble.M, t.size))
        else:
            X = np.broadcast_to(np.exp(b * t) * T + (1.0 - np.exp(b * t)) / b, (ensemble.M, t.size))
        X = np.array(X)
    else:
        mu = b - 0.5 * sigma ** 2
        expo = mu * t[None, :] + sigma * ensemble.W
        inner = np.zeros_like(expo)
        np.cumsum(np.exp(-expo[:, :-1]) * grid.dt, axis=1, out=inner[:, 1:])
        X = np.exp(expo) * (T - inner)
    return StateGrid(X[:, :, None], grid, ensemble, {"scheme": "closed-form"})
