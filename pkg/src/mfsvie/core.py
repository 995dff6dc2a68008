"""Shared numerical plumbing: grids, Brownian ensembles, particle averages,
least-squares conditional expectations and discrete M-norms.

Array conventions used throughout the package:

* states ``X`` have shape ``(M, N + 1, n)``: particle, node, component;
* Brownian increments ``dW`` have shape ``(M, N)``;
* the two-index field ``Z`` has shape ``(M, N + 1, N, n)``; ``Z[m, i, j]`` is
  the value of ``Z(t_i, .)`` on ``[t_j, t_{j+1})``.
"""
from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)


class InvalidArgument(ValueError):
    pass


class InvalidProblem(ValueError):
    pass


class UnsupportedStructure(ValueError):
    pass


class DivergedSimulation(RuntimeError):
    """Raised when a solver produces non-finite or exploding values."""

    def __init__(self, message, node=None, particle=None):
        super().__init__(message)
        self.node = node
        self.particle = particle


# ---------------------------------------------------------------------------
# grids and ensembles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int

    def __post_init__(self):
        if not (np.isfinite(self.T) and self.T > 0):
            raise InvalidArgument(f"horizon T must be positive, got {self.T!r}")
        if int(self.N) != self.N or self.N < 1:
            raise InvalidArgument(f"number of steps N must be a positive integer, got {self.N!r}")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @cached_property
    def nodes(self) -> np.ndarray:
        t = np.arange(self.N + 1, dtype=float) * self.dt
        t[-1] = self.T
        return t

    def index_of(self, t: float) -> int:
        return int(round(t / self.dt))


def build_grid(T: float, N: int) -> TimeGrid:
    return TimeGrid(float(T), int(N) if int(N) == N else N)


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Seeded Brownian increments for ``M`` particles on ``grid``."""

    grid: TimeGrid
    M: int
    seed: int
    dW: np.ndarray = field(repr=False)

    @cached_property
    def W(self) -> np.ndarray:
        W = np.zeros((self.M, self.grid.N + 1))
        np.cumsum(self.dW, axis=1, out=W[:, 1:])
        return W

    def permuted(self, perm: Sequence[int]) -> "PathEnsemble":
        perm = np.asarray(perm)
        return PathEnsemble(self.grid, self.M, self.seed, self.dW[perm].copy())

    def ito_integral(self, integrand: np.ndarray) -> np.ndarray:
        """Running Ito sums ``sum_{j<i} f[m, j] dW[m, j]`` for ``f`` of shape (M, N)."""
        out = np.zeros((self.M, self.grid.N + 1))
        np.cumsum(integrand * self.dW, axis=1, out=out[:, 1:])
        return out


def sample_ensemble(grid: TimeGrid, M: int, seed: int) -> PathEnsemble:
    if int(M) != M or M < 1:
        raise InvalidArgument(f"particle count M must be a positive integer, got {M!r}")
    rng = np.random.default_rng(int(seed))
    dW = rng.standard_normal((int(M), grid.N)) * np.sqrt(grid.dt)
    return PathEnsemble(grid, int(M), int(seed), dW)


# ---------------------------------------------------------------------------
# nonlocal (mean-field) averages
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PairKernel:
    """Two-particle kernel ``theta(t, s, x, x')`` with values in R^dim.

    ``fn`` must broadcast over leading axes of ``x`` and ``xp``.  A separable
    kernel is given instead by ``left(t, s, x) -> (..., dim, r)`` and
    ``right(t, s, xp) -> (..., r)`` with ``theta = left @ right``; averages
    then cost O(M) instead of O(M^2).
    """

    dim: int
    fn: Callable | None = None
    left: Callable | None = None
    right: Callable | None = None

    def __post_init__(self):
        if self.fn is None and (self.left is None or self.right is None):
            raise InvalidArgument("PairKernel needs fn or both left and right")

    @property
    def separable(self) -> bool:
        return self.left is not None and self.right is not None

    def __call__(self, t, s, x, xp):
        if self.fn is not None:
            return np.asarray(self.fn(t, s, x, xp), dtype=float)
        L = np.asarray(self.left(t, s, x), dtype=float)
        R = np.asarray(self.right(t, s, xp), dtype=float)
        return np.einsum("...dr,...r->...d", L, R)


def _check_dim(values, d):
    if values.shape[-1] != d:
        raise InvalidArgument(f"kernel returned last dimension {values.shape[-1]}, declared {d}")


def pair_average(kernel: PairKernel, mode: str, t: float, s: float, states: np.ndarray,
                 chunk: int = 256) -> np.ndarray:
    """Empirical nonlocal average over the particle cloud.

    ``mode="prime"`` averages the second slot: ``out[m] = mean_k theta(x_m, x_k)``.
    ``mode="star"`` averages the first slot: ``out[m] = mean_k theta(x_k, x_m)``.
    """
    states = np.asarray(states, dtype=float)
    if states.ndim == 1:
        states = states[:, None]
    M = states.shape[0]
    d = kernel.dim
    if mode not in ("prime", "star"):
        raise InvalidArgument(f"unknown averaging mode {mode!r}")

    if kernel.separable:
        L = np.broadcast_to(np.asarray(kernel.left(t, s, states), dtype=float), (M, d, _rank(kernel, t, s, states)))
        R = np.broadcast_to(np.asarray(kernel.right(t, s, states), dtype=float), (M, L.shape[-1]))
        if mode == "prime":
            out = L @ R.mean(axis=0)
        else:
            out = R @ L.mean(axis=0).T
        _check_dim(out, d)
        return out

    out = np.empty((M, d))
    for a in range(0, M, chunk):
        block = states[a:a + chunk]
        if mode == "prime":
            vals = kernel(t, s, block[:, None, :], states[None, :, :])
        else:
            vals = kernel(t, s, states[None, :, :], block[:, None, :])
        vals = np.broadcast_to(vals, (block.shape[0], M, vals.shape[-1]))
        _check_dim(vals, d)
        out[a:a + chunk] = vals.mean(axis=1)
    return out


def _rank(kernel, t, s, states):
    L = np.asarray(kernel.left(t, s, states[:1]), dtype=float)
    if L.ndim < 2 or L.shape[-2] != kernel.dim:
        raise InvalidArgument(f"separable kernel left factor must end in (dim={kernel.dim}, r), got {L.shape}")
    return L.shape[-1]


class PairMatrix:
    """Matrix-valued pair coefficient ``C(m, m')`` acting on the other particle.

    Stored either as a constant ``(n, n)`` matrix, a low-rank product
    ``L[m] @ R[m']`` with ``L`` of shape (M|1, n, r) and ``R`` of shape
    (M|1, r, n), or a dense ``(M, M, n, n)`` array.
    """

    def __init__(self, L=None, R=None, dense=None):
        if dense is not None:
            self.dense = np.asarray(dense, dtype=float)
            self.L = self.R = None
        else:
            self.L = np.asarray(L, dtype=float)
            self.R = np.asarray(R, dtype=float)
            if self.L.ndim == 2:
                self.L = self.L[None]
            if self.R.ndim == 2:
                self.R = self.R[None]
            self.dense = None

    @classmethod
    def constant(cls, C):
        C = np.atleast_2d(np.asarray(C, dtype=float))
        return cls(L=C[None], R=np.eye(C.shape[1])[None])

    @classmethod
    def outer(cls, a, b, C):
        """``C(m, m') = a[m] * b[m'] * C`` for per-particle scalar weights."""
        C = np.atleast_2d(np.asarray(C, dtype=float))
        a = np.asarray(a, dtype=float).reshape(-1, 1, 1)
        b = np.asarray(b, dtype=float).reshape(-1, 1, 1)
        return cls(L=a * C[None], R=b * np.eye(C.shape[1])[None])

    @property
    def n(self):
        return (self.dense if self.dense is not None else self.L).shape[-2]

    def apply_prime(self, X):
        """``out[m] = mean_k C(m, k) @ X[k]``."""
        if self.dense is not None:
            return np.einsum("mkab,kb->ma", self.dense, X) / X.shape[0]
        if self.R.shape[0] == 1:
            v = self.R[0] @ X.mean(axis=0)
        else:
            v = np.matmul(self.R, X[..., None])[..., 0].mean(axis=0)
        if self.L.shape[0] > 1:
            return np.matmul(self.L, v)
        return np.broadcast_to(self.L[0] @ v, (X.shape[0], self.L.shape[-2])).copy()

    @property
    def factorizes_on_mean(self) -> bool:
        """True when ``apply_prime`` depends on ``X`` only through its particle mean."""
        return self.dense is None and self.R.shape[0] == 1

    def apply_to_mean(self, xbar, M):
        """``apply_prime`` given the particle mean ``xbar``; needs ``factorizes_on_mean``."""
        v = self.R[0] @ xbar
        if self.L.shape[0] > 1:
            return np.matmul(self.L, v)
        return np.broadcast_to(self.L[0] @ v, (M, self.L.shape[-2]))

    def swap_transpose(self) -> "PairMatrix":
        """``D(m, m') = C(m', m)^T``; ``D.apply_prime`` is the star average of ``C^T``."""
        if self.dense is not None:
            return PairMatrix(dense=np.transpose(self.dense, (1, 0, 3, 2)))
        return PairMatrix(L=np.transpose(self.R, (0, 2, 1)), R=np.transpose(self.L, (0, 2, 1)))

    def apply_star_transposed(self, Y):
        """``out[m] = mean_k C(k, m)^T @ Y[k]``."""
        return self.swap_transpose().apply_prime(Y)

    def entry(self, m, k):
        if self.dense is not None:
            return self.dense[m, k]
        L = self.L[m if self.L.shape[0] > 1 else 0]
        R = self.R[k if self.R.shape[0] > 1 else 0]
        return L @ R

    def scaled(self, c) -> "PairMatrix":
        if self.dense is not None:
            return PairMatrix(dense=c * self.dense)
        return PairMatrix(L=c * self.L, R=self.R)


# ---------------------------------------------------------------------------
# conditional expectations by least squares
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegressionBasis:
    """Polynomial basis for E[.|F_t].

    ``kind="W"`` uses powers of the Brownian value at the conditioning node;
    ``kind="state"`` uses total-degree monomials of declared per-node
    features (an array of shape (M, N + 1, k)).

    ``anchor`` is the degree of the extra row-anchored terms used by
    :meth:`Regressor.project_rows`: when a backward row belongs to time t_i,
    conditioning at a later node t_r adds the features of node i times
    monomials of node r (total degree at most ``degree``).  Without them a
    target that depends on W(t_i) is conditioned on W(t_r) alone, which is
    biased for adapted free terms.  0 disables the anchor.
    """

    kind: str = "W"
    degree: int = 3
    rcond: float = 1e-10
    anchor: int = 1

    def __post_init__(self):
        if self.kind not in ("W", "state"):
            raise InvalidArgument(f"unknown basis kind {self.kind!r}")
        if self.degree < 0:
            raise InvalidArgument("basis degree must be non-negative")
        if self.anchor < 0:
            raise InvalidArgument("anchor degree must be non-negative")


def _monomials(F: np.ndarray, degree: int) -> np.ndarray:
    M, k = F.shape
    cols = [np.ones(M)]
    for deg in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(k), deg):
            cols.append(np.prod(F[:, combo], axis=1))
    return np.column_stack(cols)


class Regressor:
    """Cached least-squares projections onto basis functions at each node.

    The projection at node ``j`` is ``U_j U_j^T`` where ``U_j`` spans the
    (standardised) design matrix; singular directions below ``rcond`` are
    dropped, which is the pseudo-inverse solution.  Condition numbers are
    recorded in ``self.condition``.
    """

    def __init__(self, ensemble: PathEnsemble, basis: RegressionBasis = RegressionBasis(),
                 features: np.ndarray | None = None):
        self.ensemble = ensemble
        self.basis = basis
        if basis.kind == "state":
            if features is None:
                raise InvalidArgument("state basis requires a features array")
            features = np.asarray(features, dtype=float)
            if features.ndim == 2:
                features = features[:, :, None]
            if features.shape[:2] != (ensemble.M, ensemble.grid.N + 1):
                raise InvalidArgument(f"features shape {features.shape} does not match ensemble")
        else:
            features = ensemble.W[:, :, None]
        self.features = features
        self._U: dict[int, np.ndarray] = {}
        self._G: np.ndarray | None = None
        self._H: dict = {}
        self._anchor: dict = {}
        self.condition: dict[int, float] = {}

    def _basis(self, j: int) -> np.ndarray:
        U = self._U.get(j)
        if U is not None:
            return U
        F = self.features[:, j, :]
        sd = F.std(axis=0)
        scale = np.maximum(np.abs(F).max(axis=0), 1.0)
        keep = sd > 1e-12 * scale
        F = (F[:, keep] - F[:, keep].mean(axis=0)) / sd[keep]
        A = _monomials(F, self.basis.degree) if keep.any() else np.ones((F.shape[0], 1))
        U, S, _ = np.linalg.svd(A, full_matrices=False)
        r = int(np.sum(S > self.basis.rcond * S[0]))
        cond = S[0] / S[-1] if S[-1] > 0 else np.inf
        self.condition[j] = float(cond)
        if r < len(S):
            log.warning("regression at node %d is rank deficient (rank %d of %d, cond %.3g); using pseudo-inverse",
                        j, r, len(S), cond)
        U = np.ascontiguousarray(U[:, :r])
        self._U[j] = U
        return U

    def project(self, targets: np.ndarray, j: int) -> np.ndarray:
        """Least-squares estimate of E[targets | F_{t_j}] for every particle."""
        targets = np.asarray(targets, dtype=float)
        if targets.shape[0] != self.ensemble.M:
            raise InvalidArgument(f"targets have {targets.shape[0]} rows, expected {self.ensemble.M}")
        U = self._basis(j)
        flat = targets.reshape(targets.shape[0], -1)
        return (U @ (U.T @ flat)).reshape(targets.shape)

    def _standardised(self) -> np.ndarray:
        """Features standardised node by node, with constant columns set to zero."""
        if self._G is None:
            F = self.features
            sd = F.std(axis=0)
            scale = np.maximum(np.abs(F).max(axis=0), 1.0)
            keep = sd > 1e-12 * scale
            self._G = np.where(keep, (F - F.mean(axis=0)) / np.where(keep, sd, 1.0), 0.0)
        return self._G

    def _row_monomials(self, a: int) -> np.ndarray:
        """Homogeneous degree-``a`` monomials of the standardised features, shape (N + 1, M, c)."""
        H = self._H.get(a)
        if H is None:
            G = self._standardised()
            cols = [np.prod(G[:, :, combo], axis=2)
                    for combo in itertools.combinations_with_replacement(range(G.shape[2]), a)]
            H = np.ascontiguousarray(np.stack(cols, axis=2).transpose(1, 0, 2))
            self._H[a] = H
        return H

    def _anchor_parts(self, r: int, rows: np.ndarray):
        """Factors of the anchor columns: pairs (H, B) with H of shape (K, M, c) and B of shape (M, b).

        The columns of row k are all products ``H[k, :, c] * B[:, b]``.
        """
        Fr = self._standardised()[:, r]
        return [(self._row_monomials(a)[rows], _monomials(Fr, self.basis.degree - a))
                for a in range(1, min(self.basis.anchor, self.basis.degree) + 1)]

    def _anchor_factor(self, r: int, rows: np.ndarray, parts):
        key = (r, rows.tobytes())
        hit = self._anchor.get(key)
        if hit is not None:
            return hit
        A = np.concatenate([(H[:, :, :, None] * B[None, :, None, :]).reshape(H.shape[0], H.shape[1], -1)
                            for H, B in parts], axis=2)
        U = self._basis(r)
        UtA = U.T @ A
        AtA = np.swapaxes(A, 1, 2) @ A
        gram = AtA - np.swapaxes(UtA, 1, 2) @ UtA
        w, V = np.linalg.eigh(gram)
        scale = np.trace(AtA, axis1=1, axis2=2)
        keep = w > 1e-9 * np.maximum(scale, 1e-300)[:, None]
        inv = (V * np.where(keep, 1.0 / np.where(keep, w, 1.0), 0.0)[:, None, :]) @ np.swapaxes(V, 1, 2)
        self._anchor[key] = (UtA, inv)
        return UtA, inv

    def project_rows(self, targets: np.ndarray, r: int, rows) -> np.ndarray:
        """Project ``targets[:, k]`` (belonging to backward row ``rows[k]``) at node r.

        Uses the shared node basis plus the row-anchored terms of row k; with
        ``anchor == 0`` this is :meth:`project`.
        """
        out = self.project(targets, r)
        if self.basis.anchor == 0 or self.basis.degree == 0:
            return out
        rows = np.asarray(list(rows), dtype=int)
        M, K = targets.shape[:2]
        parts = self._anchor_parts(r, rows)
        UtA, inv = self._anchor_factor(r, rows, parts)
        U = self._basis(r)
        rest = (targets - out).reshape(M, K, -1).transpose(1, 0, 2)
        n = rest.shape[2]
        # A^T rest, block by block, without forming A
        blocks = []
        for H, B in parts:
            c = H.shape[2]
            HR = (H[:, :, :, None] * rest[:, :, None, :]).reshape(K, M, c * n)
            blocks.append((B.T @ HR).reshape(K, B.shape[1], c, n).transpose(0, 2, 1, 3).reshape(K, -1, n))
        coef = inv @ np.concatenate(blocks, axis=1)
        fit = -(U @ (UtA @ coef))
        q0 = 0
        for H, B in parts:
            c, nb = H.shape[2], B.shape[1]
            cb = coef[:, q0:q0 + c * nb].reshape(K, c, nb, n).transpose(0, 2, 1, 3).reshape(K, nb, c * n)
            fit += np.einsum("kmc,kmcn->kmn", H, (B @ cb).reshape(K, M, c, n))
            q0 += c * nb
        return out + fit.transpose(1, 0, 2).reshape(out.shape)


def regress_conditional(targets, j: int, ensemble: PathEnsemble, basis: RegressionBasis = RegressionBasis(),
                        features=None) -> np.ndarray:
    if not 0 <= j <= ensemble.grid.N:
        raise InvalidArgument(f"conditioning node {j} outside 0..{ensemble.grid.N}")
    return Regressor(ensemble, basis, features).project(targets, j)


def martingale_coefficients(targets: np.ndarray, i: int, regressor: Regressor) -> tuple[np.ndarray, float]:
    """Discrete martingale-representation density of ``targets`` (F_{t_i}-measurable).

    Returns ``(Z, residual)`` with ``Z`` of shape (M, i, n) such that
    ``targets ~ mean(targets) + sum_{j<i} Z[:, j] dW[:, j]``, and the mean-square
    reconstruction residual.  The coefficients are obtained by nested
    projections, ``Z_j = E[(eta_{j+1} - E[eta_{j+1}|F_j]) dW_j | F_j] / dt`` with
    ``eta_j = E[eta_{j+1}|F_j]``; subtracting the projection is a zero-mean
    control variate.
    """
    if i < 1:
        raise InvalidArgument("martingale coefficients need node index i >= 1")
    targets = np.asarray(targets, dtype=float)
    squeeze = targets.ndim == 1
    if squeeze:
        targets = targets[:, None]
    ens = regressor.ensemble
    dt = ens.grid.dt
    M, n = targets.shape
    Z = np.empty((M, i, n))
    eta = targets
    for j in range(i - 1, -1, -1):
        proj = regressor.project(eta, j)
        Z[:, j] = regressor.project((eta - proj) * ens.dW[:, j, None], j) / dt
        eta = proj
    recon = targets.mean(axis=0) + np.einsum("mjn,mj->mn", Z, ens.dW[:, :i])
    residual = float(np.mean(np.sum((targets - recon) ** 2, axis=1)))
    return (Z[..., 0] if squeeze else Z), residual


def complete_lower_triangle(Y: np.ndarray, Z: np.ndarray, regressor: Regressor,
                            nodes: Iterable[int] | None = None) -> np.ndarray:
    """Fill ``Z[:, i, :i]`` from the martingale representation of ``Y[:, i]``.

    All nodes are processed in one backward pass over the conditioning node,
    so each projection handles every target at once.  Returns the per-node
    mean-square reconstruction residual.
    """
    ens = regressor.ensemble
    N, dt = ens.grid.N, ens.grid.dt
    M, _, n = Y.shape
    targets = sorted(set(range(1, N + 1) if nodes is None else nodes))
    residual = np.zeros(N + 1)
    if not targets:
        return residual
    # stack[:, k] carries eta for target node targets[k]; only nodes > j are active at step j
    stack = np.empty((M, len(targets), n))
    active = 0
    order = targets[::-1]  # descending
    for j in range(N - 1, -1, -1):
        while active < len(order) and order[active] > j:
            stack[:, active] = Y[:, order[active]]
            active += 1
        if active == 0:
            continue
        eta = stack[:, :active]
        proj = regressor.project(eta, j)
        zj = regressor.project((eta - proj) * ens.dW[:, j, None, None], j) / dt
        for k in range(active):
            Z[:, order[k], j] = zj[:, k]
        stack[:, :active] = proj
    for i in targets:
        recon = Y[:, i].mean(axis=0) + np.einsum("mjn,mj->mn", Z[:, i, :i], ens.dW[:, :i])
        residual[i] = float(np.mean(np.sum((Y[:, i] - recon) ** 2, axis=1)))
    return residual


# ---------------------------------------------------------------------------
# M-solutions and norms
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class MSolutionGrid:
    Y: np.ndarray
    Z: np.ndarray
    grid: TimeGrid
    m_residual: np.ndarray | None = None
    m_tolerance: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.Y.shape[-1]

    @property
    def meanY(self) -> np.ndarray:
        return self.Y.mean(axis=0)

    @classmethod
    def zeros(cls, M: int, grid: TimeGrid, n: int) -> "MSolutionGrid":
        return cls(np.zeros((M, grid.N + 1, n)), np.zeros((M, grid.N + 1, grid.N, n)), grid)

    def copy(self) -> "MSolutionGrid":
        return MSolutionGrid(self.Y.copy(), self.Z.copy(), self.grid,
                             None if self.m_residual is None else self.m_residual.copy(),
                             None if self.m_tolerance is None else self.m_tolerance.copy())


def _m_norm_fields(Y, Z, grid: TimeGrid, beta: float) -> float:
    N, dt = grid.N, grid.dt
    total = 0.0
    for i in range(N):
        y2 = np.mean(np.sum(Y[:, i] ** 2, axis=-1))
        z2 = np.mean(np.sum(Z[:, i, i:] ** 2, axis=(-2, -1))) * dt
        total += np.exp(beta * grid.nodes[i]) * dt * (y2 + z2)
    return float(total)


def discrete_m_norm(sol: MSolutionGrid, beta: float = 0.0) -> float:
    """Squared discrete M^2_beta norm (left-endpoint quadrature in t)."""
    return _m_norm_fields(sol.Y, sol.Z, sol.grid, beta)


def m_distance(a: MSolutionGrid, b: MSolutionGrid, beta: float = 0.0) -> float:
    """``discrete_m_norm(a - b, beta)`` without materialising the difference."""
    N, dt = a.grid.N, a.grid.dt
    total = 0.0
    for i in range(N):
        y2 = np.mean(np.sum((a.Y[:, i] - b.Y[:, i]) ** 2, axis=-1))
        z2 = np.mean(np.sum((a.Z[:, i, i:] - b.Z[:, i, i:]) ** 2, axis=(-2, -1))) * dt
        total += np.exp(beta * a.grid.nodes[i]) * dt * (y2 + z2)
    return float(total)


def standard_error(samples: np.ndarray, axis=0) -> np.ndarray:
    samples = np.asarray(samples, dtype=float)
    m = samples.shape[axis]
    return samples.std(axis=axis, ddof=1) / np.sqrt(m) if m > 1 else np.zeros_like(samples.mean(axis=axis))


def parallel_map(fn: Callable, items: Sequence, threads: int = 1) -> list:
    """Order-preserving map; each item writes disjoint output so results do not depend on ``threads``."""
    if threads is None or threads <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def as_particle_array(value, M: int, n: int) -> np.ndarray:
    """Broadcast a scalar, (n,) or (M, n) value to a fresh (M, n) float array."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 1 and arr.shape[0] == M and n == 1 and M != 1:
        arr = arr[:, None]
    return np.array(np.broadcast_to(arr, (M, n)), dtype=float)


def as_matrix_field(value, M: int, n: int) -> np.ndarray:
    """Broadcast a scalar, (n, n) or (M, n, n) coefficient to shape (M|1, n, n)."""
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full((1, n, n), float(arr)) * np.eye(n)[None] if n > 1 else arr.reshape(1, 1, 1)
    if arr.ndim == 1:
        if arr.shape[0] == M and n == 1:
            return arr.reshape(M, 1, 1)
        raise InvalidArgument(f"cannot interpret coefficient of shape {arr.shape} as a matrix field")
    if arr.ndim == 2:
        if arr.shape != (n, n):
            raise InvalidArgument(f"coefficient shape {arr.shape} does not match dimension {n}")
        return arr[None]
    if arr.shape[1:] != (n, n) or arr.shape[0] not in (1, M):
        raise InvalidArgument(f"coefficient shape {arr.shape} does not match (M, {n}, {n})")
    return arr


FD_STEP = 1e-5


def fd_jacobian(f: Callable, args: Sequence[np.ndarray], wrt: int, h: float = FD_STEP) -> np.ndarray:
    """Central-difference Jacobian of ``f(*args)`` with respect to ``args[wrt]``.

    Every argument is a batch of shape (K, d_a); ``f`` returns (K, p).  The
    result has shape (K, p, d_wrt).  All perturbations are evaluated in a
    single batched call.
    """
    args = [np.asarray(a, dtype=float) for a in args]
    x = args[wrt]
    K, d = x.shape
    steps = np.kron(np.concatenate([np.eye(d), -np.eye(d)]), np.ones((K, 1))) * h
    big = [np.tile(a, (2 * d, 1)) for a in args]
    big[wrt] = big[wrt] + steps
    out = np.asarray(f(*big), dtype=float).reshape(2 * d, K, -1)
    return np.transpose((out[:d] - out[d:]) / (2 * h), (1, 2, 0))
