"""Adjoint equations of linear mean-field SVIEs and numerical duality pairings."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .backward import LinearBackwardCoeffs
from .core import (InvalidArgument, MSolutionGrid, PairMatrix, PathEnsemble, RegressionBasis, Regressor, TimeGrid,
                   UnsupportedStructure, as_particle_array, standard_error)
from .forward import LinearForwardCoeffs, StateGrid

log = logging.getLogger(__name__)


def _transposed(f):
    """(i, j) -> f(j, i)^T for local blocks, or None."""
    if f is None:
        return None

    def g(i, j):
        v = np.asarray(f(j, i), dtype=float)
        return v if v.ndim < 2 else np.swapaxes(v, -1, -2)

    return g


def _swapped(f, n):
    """(i, j) -> swap-transpose of the pair block f(j, i)."""
    if f is None:
        return None

    def g(i, j):
        v = f(j, i)
        P = v if isinstance(v, PairMatrix) else PairMatrix.constant(np.eye(n) * float(v) if np.ndim(v) == 0 else v)
        return P.swap_transpose()

    return g


def build_fsvie_adjoint(c: LinearForwardCoeffs) -> LinearBackwardCoeffs:
    """Coefficients of the adjoint MF-BSVIE of a linear MF-FSVIE.

    Abar0(t,s) = A0(s,t)^T, Cbar0(t,s) = A1(s,t)^T (acting on Z(s,t)), and the
    pair blocks Abar1, Cbar1 are C0, C1 with slots swapped and transposed, so
    that their prime average is the star average of C^T.
    """
    pd = set()
    mapping = {"A0": "A0", "A1": "C0", "C0": "A1", "C1": "C1"}
    for name in c.path_dependent:
        pd.add(mapping[name])
    return LinearBackwardCoeffs(
        n=c.n,
        A0=_transposed(c.A0),
        C0=_transposed(c.A1),
        A1=_swapped(c.C0, c.n),
        C1=_swapped(c.C1, c.n),
        bound=c.bound,
        path_dependent=frozenset(pd),
    )


class ConditionalExpectation:
    """E[. | F_{t_j}] applied to coefficient arrays of shape (M, ...)."""

    def __init__(self, ensemble: PathEnsemble, basis: RegressionBasis | None = None, features=None):
        self.regressor = Regressor(ensemble, basis or RegressionBasis(), features)

    def __call__(self, values, j):
        values = np.asarray(values, dtype=float)
        M = self.regressor.ensemble.M
        if values.ndim == 0 or values.shape[0] != M:
            return values  # shared (deterministic) value
        return self.regressor.project(values, j)


def build_bsvie_adjoint(c: LinearBackwardCoeffs, ensemble: PathEnsemble | None = None,
                        basis: RegressionBasis | None = None, features=None) -> LinearForwardCoeffs:
    """Coefficients of the adjoint MF-FSVIE of a linear MF-BSVIE without Z(t,s) drift.

    The diffusion blocks carry E[Cbar(s,t)^T | F_s].  Blocks declared in
    ``c.path_dependent`` are conditioned by regression on ``ensemble``; all
    others are treated as F_s-measurable and passed through unchanged, which
    is logged because it silently drops the conditioning.
    """
    if c.B0 is not None or c.B1 is not None:
        raise UnsupportedStructure("the backward duality needs Bbar0 = Bbar1 = 0 (no Z(t,s) drift)")
    n = c.n
    cond = None
    needs = {"C0", "C1"} & set(c.path_dependent)
    if needs:
        if ensemble is None:
            raise InvalidArgument("path-dependent diffusion blocks need an ensemble for the conditioning")
        cond = ConditionalExpectation(ensemble, basis, features)
    for name in ("C0", "C1"):
        if getattr(c, name) is not None and name not in c.path_dependent:
            log.info("treating Cbar%s as F_s-measurable: E[Cbar%s(s,t)^T | F_s] taken as the identity map",
                     name[1], name[1])

    A1 = _transposed(c.C0)
    if c.C0 is not None and "C0" in c.path_dependent:
        raw = A1

        def A1(i, j):
            return cond(raw(i, j), j)

    C1 = _swapped(c.C1, n)
    if c.C1 is not None and "C1" in c.path_dependent:
        raw1 = C1

        def C1(i, j):
            P = raw1(i, j)
            if P.dense is not None:
                raise UnsupportedStructure("conditioning of dense pair blocks is not supported")
            return PairMatrix(L=cond(P.L, j), R=cond(P.R, j))

    pd = set()
    mapping = {"A0": "A0", "A1": "C0"}
    for name in c.path_dependent:
        if name in mapping:
            pd.add(mapping[name])
    return LinearForwardCoeffs(n=n, A0=_transposed(c.A0), A1=A1, C0=_swapped(c.A1, n), C1=C1, bound=c.bound,
                               path_dependent=frozenset(pd))


# ---------------------------------------------------------------------------
# pairings
# ---------------------------------------------------------------------------


@dataclass
class DualityReport:
    lhs: float
    rhs: float
    se_lhs: float
    se_rhs: float
    bias: float
    seed: int
    M: int
    N: int

    @property
    def tolerance(self) -> float:
        return 3 * (self.se_lhs + self.se_rhs) + self.bias

    @property
    def passed(self) -> bool:
        return abs(self.lhs - self.rhs) <= self.tolerance

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"

    def row(self) -> dict:
        return {"lhs": self.lhs, "rhs": self.rhs, "se_lhs": self.se_lhs, "se_rhs": self.se_rhs,
                "tol": self.tolerance, "verdict": self.verdict}

    def text(self) -> str:
        return (f"duality pairing (M={self.M}, N={self.N}, seed={self.seed})\n"
                f"  lhs = {self.lhs:.6f} +- {self.se_lhs:.2e}\n"
                f"  rhs = {self.rhs:.6f} +- {self.se_rhs:.2e}\n"
                f"  |lhs - rhs| = {abs(self.lhs - self.rhs):.3e}, tolerance {self.tolerance:.3e}: {self.verdict}")


def node_values(f, grid: TimeGrid, M: int, n: int) -> np.ndarray:
    """Evaluate a node-indexed free term into an (M, N + 1, n) array."""
    if callable(f):
        out = np.empty((M, grid.N + 1, n))
        for i in range(grid.N + 1):
            out[:, i] = as_particle_array(f(i), M, n)
        return out
    arr = np.asarray(f, dtype=float)
    return np.broadcast_to(arr, (M, grid.N + 1, n))


def pairing_samples(U: np.ndarray, V: np.ndarray, dt: float) -> np.ndarray:
    """Per-particle sum_i <U_i, V_i> dt over all nodes 0..N."""
    return np.einsum("min,min->m", U, V) * dt


def duality_pairing(X: StateGrid, psi, Y: MSolutionGrid, phi, grid: TimeGrid, bias: float = 0.0) -> DualityReport:
    """Compare E sum <X, psi> dt with E sum <Y, phi> dt on common random numbers."""
    if X.grid != grid or Y.grid != grid:
        raise InvalidArgument("state and adjoint must live on the given grid")
    if X.X.shape[:2] != Y.Y.shape[:2]:
        raise InvalidArgument("state and adjoint must share the particle ensemble")
    M, n = X.X.shape[0], X.X.shape[2]
    lhs_s = pairing_samples(X.X, node_values(psi, grid, M, n), grid.dt)
    rhs_s = pairing_samples(Y.Y, node_values(phi, grid, M, n), grid.dt)
    return DualityReport(float(lhs_s.mean()), float(rhs_s.mean()), float(standard_error(lhs_s)),
                         float(standard_error(rhs_s)), float(bias), X.ensemble.seed, M, grid.N)


# ---------------------------------------------------------------------------
# twice adjoint
# ---------------------------------------------------------------------------


@dataclass
class TwiceAdjointReport:
    kind: str
    equal: bool
    max_difference: dict = field(default_factory=dict)
    discrepancy: dict = field(default_factory=dict)
    noise_floor: dict = field(default_factory=dict)

    def ratio(self, name):
        floor = self.noise_floor.get(name, 0.0)
        return self.discrepancy[name] / floor if floor > 0 else np.inf


def _pairs(N, stride):
    return [(i, j) for i in range(0, N + 1, stride) for j in range(0, i + 1, stride)]


def _pair_entries(P: PairMatrix, M: int, rng) -> np.ndarray:
    ms = rng.integers(0, M, size=8)
    ks = rng.integers(0, M, size=8)
    return np.stack([P.entry(m, k) for m, k in zip(ms, ks)])


def check_twice_adjoint(c, grid: TimeGrid, ensemble: PathEnsemble | None = None,
                        basis: RegressionBasis | None = None, features=None, stride: int = 1,
                        seed: int = 0) -> TwiceAdjointReport:
    """Apply the two adjoint constructions in sequence and compare with the input.

    Forward input: coefficient blocks are compared at sampled (i, j, m, m')
    tuples; for deterministic coefficients the round trip is exact.
    Backward input: reports, per Z(s,t) block, the root-mean-square gap
    between E[Cbar(t,s) | F_t] and Cbar(t,s) together with the regression
    noise floor sqrt(p / M) * rms(residual) of the fitted values.
    """
    N = grid.N
    if isinstance(c, LinearForwardCoeffs):
        twice = build_bsvie_adjoint(build_fsvie_adjoint(c), ensemble, basis, features)
        diffs = {}
        M = ensemble.M if ensemble is not None else 1
        for name in ("A0", "A1", "C0", "C1"):
            f, g = getattr(c, name), getattr(twice, name)
            if f is None and g is None:
                continue
            worst = 0.0
            rng = np.random.default_rng(seed)
            for i, j in _pairs(N, stride):
                if name in ("A0", "A1"):
                    a, b = c.local(name, i, j, M), twice.local(name, i, j, M)
                else:
                    Pa, Pb = c.pair(name, i, j), twice.pair(name, i, j)
                    st = rng.bit_generator.state
                    a = _pair_entries(Pa, M, rng)
                    rng.bit_generator.state = st
                    b = _pair_entries(Pb, M, rng)
                worst = max(worst, float(np.max(np.abs(np.asarray(a) - np.asarray(b)))))
            diffs[name] = worst
        return TwiceAdjointReport("forward", all(v == 0.0 for v in diffs.values()), max_difference=diffs)

    if not isinstance(c, LinearBackwardCoeffs):
        raise InvalidArgument("expected linear forward or backward coefficients")
    if ensemble is None:
        raise InvalidArgument("the backward round trip needs an ensemble")
    twice = build_fsvie_adjoint(build_bsvie_adjoint(c, ensemble, basis, features))
    M = ensemble.M
    reg = Regressor(ensemble, basis or RegressionBasis(), features)
    report = TwiceAdjointReport("backward", True)
    for name in ("C0", "C1"):
        if getattr(c, name) is None:
            continue
        sq, floor_sq, count = 0.0, 0.0, 0
        for i, j in _pairs(N, stride):
            if j == i:
                continue
            t, s = j, i  # backward blocks are indexed (t, s) with t <= s
            if name == "C0":
                orig = np.broadcast_to(c.local("C0", t, s, M), (M, c.n, c.n))
                back = np.broadcast_to(twice.local("C0", t, s, M), (M, c.n, c.n))
            else:
                Po, Pb = c.pair("C1", t, s), twice.pair("C1", t, s)
                if Po.dense is not None:
                    raise UnsupportedStructure("dense pair blocks are not supported here")
                orig = np.concatenate([np.broadcast_to(Po.L, (M,) + Po.L.shape[1:]),
                                       np.swapaxes(np.broadcast_to(Po.R, (M,) + Po.R.shape[1:]), 1, 2)], axis=2)
                back = np.concatenate([np.broadcast_to(Pb.L, (M,) + Pb.L.shape[1:]),
                                       np.swapaxes(np.broadcast_to(Pb.R, (M,) + Pb.R.shape[1:]), 1, 2)], axis=2)
            gap = float(np.mean(np.sum((orig - back) ** 2, axis=(-2, -1))))
            sq += gap
            p = reg._basis(t).shape[1]
            floor_sq += gap * p / M
            count += 1
        disc = np.sqrt(sq / max(count, 1))
        report.discrepancy[name] = float(disc)
        report.noise_floor[name] = float(np.sqrt(floor_sq / max(count, 1)))
    report.equal = all(report.discrepancy[k] <= 10 * report.noise_floor[k] for k in report.discrepancy)
    return report
