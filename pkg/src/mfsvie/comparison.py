"""Comparison theorems: cone predicates, hypothesis validators, ordering checks
and the counterexamples showing where comparison fails.

Orderings are checked on particle-mean profiles with the Monte Carlo
tolerance ``3 * SE + C * dt`` per node; pathwise extremes are reported
alongside (common random numbers make them meaningful).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .backward import (BackwardProblem, LinearBackwardCoeffs, LinearBackwardProblem, closed_form_example_5_10,
                       example_5_10, linear_backward_as_problem, psi_values, solve_mf_bsvie_picard)
from .core import (InvalidArgument, PairMatrix, PathEnsemble, RegressionBasis, Regressor, TimeGrid,
                   UnsupportedStructure, as_particle_array, fd_jacobian, pair_average, standard_error)
from .forward import (ForwardProblem, LinearForwardCoeffs, closed_form_example_5_2, closed_form_example_5_4,
                      example_5_2_problem, example_5_4, solve_linear_fsvie, solve_mf_fsvie)

# Discretisation constant in the tolerance 3 SE + C dt.  Calibrated on the
# deterministic instances with exact answers (Example 5.4 forward Euler and
# the backward equation with A0 = 1), whose observed error constants are
# about 0.4 and 1.4; a factor of about 1.5 is added on top.
DEFAULT_C = 2.0
HYPOTHESIS_TOL = 1e-6

THEOREMS = ("P5.3", "P5.5", "P5.6", "T5.7", "T5.8", "T5.9")


class ConeTag(enum.Enum):
    MPLUS = "Mplus"        # off-diagonal entries >= 0
    MHAT_PLUS = "MhatPlus"  # all entries >= 0
    MZERO = "Mzero"        # diagonal


def _offdiag(A):
    A = np.asarray(A, dtype=float)
    n = A.shape[-1]
    if A.shape[-2] != n:
        raise InvalidArgument(f"cone {ConeTag.MPLUS.value}/{ConeTag.MZERO.value} needs square matrices, got {A.shape}")
    return A[..., ~np.eye(n, dtype=bool)]


def cone_violation(A, tag: ConeTag) -> float:
    """Most negative entry relevant to ``tag`` (0 when ``A`` is in the cone).

    Leading axes are treated as a batch.  For the diagonal cone the largest
    off-diagonal magnitude is returned with a minus sign.
    """
    tag = ConeTag(tag)
    A = np.asarray(A, dtype=float)
    if A.ndim < 2:
        A = A.reshape(A.shape + (1,) * (2 - A.ndim))
    if tag is ConeTag.MHAT_PLUS:
        vals = A
    elif tag is ConeTag.MPLUS:
        vals = _offdiag(A)
    else:
        vals = -np.abs(_offdiag(A))
    return float(min(0.0, vals.min())) if vals.size else 0.0


def cone_membership(A, tag: ConeTag, atol: float = 0.0) -> bool:
    return cone_violation(A, tag) >= -atol


# ---------------------------------------------------------------------------
# hypothesis validation
# ---------------------------------------------------------------------------


@dataclass
class HypothesisCheck:
    name: str
    worst: float = 0.0
    where: str = ""

    def update(self, value: float, where: str):
        if value < self.worst:
            self.worst, self.where = float(value), where


@dataclass
class HypothesisReport:
    theorem: str
    checks: dict = field(default_factory=dict)
    tolerance: float = HYPOTHESIS_TOL

    def record(self, name: str, value: float, where: str = ""):
        self.checks.setdefault(name, HypothesisCheck(name)).update(value, where)

    def cone(self, name: str, A, tag: ConeTag, where: str = ""):
        self.record(name, cone_violation(A, tag), where)

    def zero(self, name: str, A, where: str = ""):
        A = np.asarray(A, dtype=float)
        self.record(name, -float(np.abs(A).max()) if A.size else 0.0, where)

    @property
    def violations(self) -> list[HypothesisCheck]:
        return [c for c in self.checks.values() if c.worst < -self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.violations

    def text(self) -> str:
        head = f"{self.theorem}: {'hypotheses hold' if self.passed else 'hypotheses violated'}"
        lines = [head] + [f"  {c.name}: worst {c.worst:.3g} at {c.where}" for c in self.violations]
        return "\n".join(lines)


def _triples(grid: TimeGrid, count: int, rng) -> list[tuple[int, int, int]]:
    """Node triples s <= t0 < t1, always including the extreme ones."""
    N = grid.N
    out = {(0, 0, N), (0, N - 1, N), (N - 1, N - 1, N)}
    while len(out) < count:
        t0, t1 = sorted(rng.choice(N + 1, size=2, replace=False))
        out.add((int(rng.integers(0, t0 + 1)), int(t0), int(t1)))
    return sorted(out)


def _at(grid, *idx):
    return ", ".join(f"{nm}={grid.nodes[i]:.4g}" for nm, i in zip(("s", "t0", "t1"), idx))


@dataclass
class _ForwardBlocks:
    A0: np.ndarray  # (K, n, n)
    C0: np.ndarray  # (P, n, n) over sampled particle pairs
    A1: np.ndarray
    C1: np.ndarray


def _linear_forward_blocks(c: LinearForwardCoeffs, i: int, j: int, parts, pairs) -> _ForwardBlocks:
    n = c.n
    out = {}
    for name in ("A0", "A1"):
        A = c.local(name, i, j, 1 if parts is None else max(parts) + 1)
        out[name] = np.zeros((1, n, n)) if A is None else (A if A.shape[0] == 1 else A[parts])
    for name in ("C0", "C1"):
        P = c.pair(name, i, j)
        out[name] = np.zeros((1, n, n)) if P is None else np.stack([P.entry(m, k) for m, k in pairs])
    return _ForwardBlocks(**out)


def _kernel_value(kernel, t, s, x, xp):
    return np.asarray(kernel(t, s, x, xp), dtype=float).reshape(x.shape[0], -1)


def _field_parts(f, kernel, t, s, x):
    """Derivatives of ``f(t, s, x, gamma)`` with gamma the average of ``kernel`` over the sample cloud ``x``.

    Returns (f_x, f_gamma, theta_x, theta_x') with the kernel derivatives on
    all ordered pairs (k, l) of sample states, shape (K, K, m, n).
    """
    K, n = x.shape
    if f is None:
        return np.zeros((K, n, n)), None, None, None
    if kernel is None:
        fx = fd_jacobian(lambda xx: f(t, s, xx, None), [x], 0)
        return fx, None, None, None
    gam = pair_average(kernel, "prime", t, s, x)
    fx = fd_jacobian(lambda xx, gg: f(t, s, xx, gg), [x, gam], 0)
    fg = fd_jacobian(lambda xx, gg: f(t, s, xx, gg), [x, gam], 1)
    X = np.repeat(x, K, axis=0)
    XP = np.tile(x, (K, 1))
    th = lambda a, b: _kernel_value(kernel, t, s, a, b)
    tx = fd_jacobian(th, [X, XP], 0).reshape(K, K, -1, n)
    txp = fd_jacobian(th, [X, XP], 1).reshape(K, K, -1, n)
    return fx, fg, tx, txp


def _generic_forward_blocks(p: ForwardProblem, t, s, x) -> _ForwardBlocks:
    K, n = x.shape
    blocks = {}
    for (A, C), f, kern in ((("A0", "C0"), p.b, p.theta_b), (("A1", "C1"), p.sigma, p.theta_sigma)):
        fx, fg, tx, txp = _field_parts(f, kern, t, s, x)
        if fg is None:
            blocks[A], blocks[C] = fx, np.zeros((1, n, n))
        else:
            blocks[A] = fx + np.einsum("kam,kmb->kab", fg, tx.mean(axis=1))
            blocks[C] = np.einsum("kam,klmb->klab", fg, txp).reshape(K * K, n, n)
    return _ForwardBlocks(**blocks)


def _sample_states(n, count, rng, states=None):
    if states is not None:
        states = np.asarray(states, dtype=float).reshape(-1, n)
        idx = rng.choice(states.shape[0], size=min(count, states.shape[0]), replace=False)
        return states[np.sort(idx)]
    return rng.normal(scale=2.0, size=(count, n))


def _phi_values(phi, i, n):
    return np.atleast_2d(np.asarray(phi(i), dtype=float)).reshape(-1, n) if np.ndim(phi(i)) > 0 else \
        np.full((1, n), float(phi(i)))


def validate_hypotheses(spec, theorem: str, grid: TimeGrid, ensemble: PathEnsemble | None = None,
                        phi=None, samples: int = 16, states=None, seed: int = 0) -> HypothesisReport:
    """Check the hypotheses of a comparison result pointwise on sampled nodes, states and particles.

    ``spec`` is, by theorem:

    * ``P5.3``, ``P5.5``, ``P5.6``: a :class:`ForwardProblem`, or a
      :class:`LinearForwardCoeffs` together with ``phi``;
    * ``T5.7``: a pair ``(p0, p1)`` of forward problems;
    * ``T5.8``: a :class:`LinearBackwardProblem` (or coefficients with ``phi``
      holding the free term psi);
    * ``T5.9``: a pair ``(p0, p1)`` of backward problems.

    Derivatives are central finite differences.  Nothing is raised; the
    report lists every violated hypothesis with its worst value and location.
    """
    if theorem not in THEOREMS:
        raise InvalidArgument(f"unknown theorem tag {theorem!r}; expected one of {THEOREMS}")
    rng = np.random.default_rng(seed)
    rep = HypothesisReport(theorem)
    triples = _triples(grid, samples, rng)
    if theorem in ("P5.3", "P5.5", "P5.6"):
        _validate_linear_forward(spec, theorem, grid, ensemble, phi, triples, rng, states, rep)
    elif theorem == "T5.7":
        _validate_t57(spec, grid, ensemble, triples, rng, states, rep)
    elif theorem == "T5.8":
        _validate_t58(spec, grid, ensemble, phi, triples, rng, states, rep)
    else:
        _validate_t59(spec, grid, ensemble, triples, rng, states, rep)
    return rep


def _forward_block_fn(spec, ensemble, rng, states, n):
    if isinstance(spec, LinearForwardCoeffs):
        M = ensemble.M if ensemble is not None else 1
        parts = np.sort(rng.choice(M, size=min(M, 16), replace=False))
        pairs = [(int(a), int(b)) for a, b in zip(parts, rng.permutation(parts))]
        return lambda i, j, grid: _linear_forward_blocks(spec, i, j, parts, pairs)
    x = _sample_states(n, 12, rng, states)
    return lambda i, j, grid: _generic_forward_blocks(spec, grid.nodes[i], grid.nodes[j], x)


def _validate_linear_forward(spec, theorem, grid, ensemble, phi, triples, rng, states, rep):
    if isinstance(spec, ForwardProblem):
        phi = spec.phi
    elif not isinstance(spec, LinearForwardCoeffs):
        raise InvalidArgument(f"{theorem} expects a ForwardProblem or LinearForwardCoeffs")
    if phi is None:
        raise InvalidArgument("free term phi is required")
    n = spec.n
    blocks = _forward_block_fn(spec, ensemble, rng, states, n)
    for s, t0, t1 in triples:
        where = _at(grid, s, t0, t1)
        b0, b1 = blocks(t0, s, grid), blocks(t1, s, grid)
        f0, f1 = _phi_values(phi, t0, n), _phi_values(phi, t1, n)
        rep.zero("no nonlocal diffusion (C1 = 0)", b1.C1, where)
        rep.cone("free term nonnegative", f0, ConeTag.MHAT_PLUS, where)
        rep.cone("C0 in MhatPlus", b1.C0, ConeTag.MHAT_PLUS, where)
        if theorem == "P5.5":
            rep.cone("A0 in MhatPlus", b1.A0, ConeTag.MHAT_PLUS, where)
            rep.zero("no diffusion (A1 = 0)", b1.A1, where)
            continue
        rep.cone("A0 in Mplus", b1.A0, ConeTag.MPLUS, where)
        rep.cone("A1 in Mzero", b1.A1, ConeTag.MZERO, where)
        rep.zero("A1 independent of t", b1.A1 - b0.A1, where)
        if theorem == "P5.3":
            rep.zero("A0 independent of t", b1.A0 - b0.A0, where)
            rep.zero("C0 independent of t", b1.C0 - b0.C0, where)
            rep.zero("free term constant", f1 - f0, where)
        else:
            rep.cone("free term nondecreasing in t", f1 - f0, ConeTag.MHAT_PLUS, where)
            rep.cone("A0 nondecreasing in t", b1.A0 - b0.A0, ConeTag.MHAT_PLUS, where)
            rep.cone("C0 nondecreasing in t", b1.C0 - b0.C0, ConeTag.MHAT_PLUS, where)


def _validate_t57(spec, grid, ensemble, triples, rng, states, rep):
    p0, p1 = spec
    n = p0.n
    x = _sample_states(n, 12, rng, states)
    K = x.shape[0]
    X, XP = np.repeat(x, K, axis=0), np.tile(x, (K, 1))
    for p in (p0, p1):
        if p.theta_sigma is not None:
            rep.record("no nonlocal diffusion", -1.0, f"problem {p.name or '?'} has a diffusion kernel")
    M = ensemble.M if ensemble is not None else 1

    def parts(t, s):
        fx, fg, tx, txp = _field_parts(p0.b, p0.theta_b, t, s, x)
        gam = pair_average(p0.theta_b, "prime", t, s, x) if p0.theta_b is not None else None
        gam1 = pair_average(p1.theta_b, "prime", t, s, x) if p1.theta_b is not None else None
        db = _call(p1.b, t, s, x, gam1 if gam1 is not None else gam, n) - _call(p0.b, t, s, x, gam, n)
        out = {"b0_x": fx, "b1 - b0": db}
        if fg is not None:
            out["b0_gamma theta0_x"] = np.einsum("kam,klmb->klab", fg, tx)
            out["b0_gamma theta0_x'"] = np.einsum("kam,klmb->klab", fg, txp)
        if p0.theta_b is not None or p1.theta_b is not None:
            th0 = _kernel_value(p0.theta_b, t, s, X, XP) if p0.theta_b is not None else 0.0
            th1 = _kernel_value(p1.theta_b, t, s, X, XP) if p1.theta_b is not None else 0.0
            dth = np.broadcast_to(np.asarray(th1 - th0), (K * K,) + np.shape(th1 - th0)[1:]).reshape(K, K, -1)
            out["theta1 - theta0"] = dth
            if fg is not None:
                out["b0_gamma (theta1 - theta0)"] = np.einsum("kam,klm->kla", fg, dth)
        return out, fg

    for s, t0, t1 in triples:
        where = _at(grid, s, t0, t1)
        ts, ta, tb = grid.nodes[s], grid.nodes[t0], grid.nodes[t1]
        q0, fg = parts(ta, ts)
        q1, _ = parts(tb, ts)
        if fg is not None:
            rep.cone("b0_gamma in MhatPlus", fg, ConeTag.MHAT_PLUS, where)
        for name in q0:
            rep.cone(f"{name} nonnegative", q0[name], ConeTag.MHAT_PLUS, where)
            rep.cone(f"{name} nondecreasing in t", q1[name] - q0[name], ConeTag.MHAT_PLUS, where)
        for p in (p0, p1):
            if p.sigma is not None:
                sx = fd_jacobian(lambda xx: _call(p.sigma, ts, ts, xx, None, n), [x], 0)
                rep.cone("sigma_x in Mzero", sx, ConeTag.MZERO, where)
                rep.zero("sigma independent of t",
                         _call(p.sigma, tb, ts, x, None, n) - _call(p.sigma, ta, ts, x, None, n), where)
        rep.zero("same diffusion in both equations",
                 _call(p1.sigma, ta, ts, x, None, n) - _call(p0.sigma, ta, ts, x, None, n), where)
        f0 = as_particle_array(p1.phi(t0), M, n) - as_particle_array(p0.phi(t0), M, n)
        f1 = as_particle_array(p1.phi(t1), M, n) - as_particle_array(p0.phi(t1), M, n)
        rep.cone("phi1 - phi0 nonnegative", f0, ConeTag.MHAT_PLUS, where)
        rep.cone("phi1 - phi0 nondecreasing in t", f1 - f0, ConeTag.MHAT_PLUS, where)


def _call(f, t, s, x, gam, n):
    if f is None:
        return np.zeros((x.shape[0], n))
    return np.broadcast_to(np.asarray(f(t, s, x, gam), dtype=float), (x.shape[0], n))


def _backward_generic(spec, grid, phi=None) -> BackwardProblem:
    if isinstance(spec, LinearBackwardProblem):
        return linear_backward_as_problem(spec.coeffs, spec.psi, grid)
    if isinstance(spec, LinearBackwardCoeffs):
        if phi is None:
            raise InvalidArgument("free term psi is required with bare coefficients")
        return linear_backward_as_problem(spec, phi, grid)
    if isinstance(spec, BackwardProblem):
        return spec
    raise InvalidArgument(f"expected a backward problem, got {type(spec).__name__}")


def _backward_parts(p: BackwardProblem, t, s, y):
    """Derivatives of the generator in each slot, with kernel derivatives on sample pairs.

    Returns a dict with g_y, g_z, g_zhat (K, n, n), g_gamma (K, n, m) and
    theta derivatives in the six slots (K, K, m, n), or ``None`` entries.
    """
    K, n = y.shape
    z = np.zeros_like(y)
    state = np.concatenate([y, z, z], axis=1)
    out = {}
    gam = pair_average(p.theta, "prime", t, s, state) if p.theta is not None else None
    if p.g is None:
        zero = np.zeros((K, n, n))
        return {"g_y": zero, "g_z": zero, "g_zhat": zero, "g_gamma": None}
    args = [y, z, z] + ([gam] if gam is not None else [])

    def g(yy, zz, hh, gg=None):
        return np.broadcast_to(np.asarray(p.g(t, s, yy, zz, hh, gg), dtype=float), (yy.shape[0], n))

    for k, name in enumerate(("g_y", "g_z", "g_zhat")):
        out[name] = fd_jacobian(g, args, k)
    out["g_gamma"] = fd_jacobian(g, args, 3) if gam is not None else None
    if p.theta is not None:
        X, XP = np.repeat(state, K, axis=0), np.tile(state, (K, 1))
        th = lambda a, b: _kernel_value(p.theta, t, s, a, b)
        jx = fd_jacobian(th, [X, XP], 0).reshape(K, K, -1, 3 * n)
        jxp = fd_jacobian(th, [X, XP], 1).reshape(K, K, -1, 3 * n)
        for k, slot in enumerate(("y", "z", "zhat")):
            out[f"theta_{slot}"] = jx[..., k * n:(k + 1) * n]
            out[f"theta_{slot}'"] = jxp[..., k * n:(k + 1) * n]
    return out


def _validate_t58(spec, grid, ensemble, phi, triples, rng, states, rep):
    p = _backward_generic(spec, grid, phi)
    n = p.n
    y = _sample_states(n, 12, rng, states)
    M = ensemble.M if ensemble is not None else 1

    def blocks(t_idx, s_idx):
        d = _backward_parts(p, grid.nodes[t_idx], grid.nodes[s_idx], y)
        A0, C0 = d["g_y"], d["g_zhat"]
        if d["g_gamma"] is not None and "theta_y" in d:
            gg = d["g_gamma"]
            A0 = A0 + np.einsum("kam,kmb->kab", gg, d["theta_y"].mean(axis=1))
            C0 = C0 + np.einsum("kam,kmb->kab", gg, d["theta_zhat"].mean(axis=1))
            zfree = d["g_z"] + np.einsum("kam,kmb->kab", gg, d["theta_z"].mean(axis=1))
            pair = {nm: np.einsum("kam,klmb->klab", gg, d[f"theta_{nm}'"]) for nm in ("y", "z", "zhat")}
        else:
            zfree = d["g_z"]
            pair = {nm: np.zeros((1, n, n)) for nm in ("y", "z", "zhat")}
        return A0, C0, zfree, pair

    for s, t0, t1 in triples:
        where = _at(grid, s, t0, t1)
        A0, C0, zts, pair = blocks(s, t1)
        rep.zero("no Z(t,s) in the drift", zts, where)
        rep.zero("no Z(t,s) in the nonlocal term", pair["z"], where)
        rep.zero("no Z(s,t) in the nonlocal term", pair["zhat"], where)
        rep.cone("A0bar in Mplus", A0, ConeTag.MPLUS, where)
        rep.cone("A1bar in MhatPlus", pair["y"], ConeTag.MHAT_PLUS, where)
        rep.cone("C0bar in Mzero", C0, ConeTag.MZERO, where)
        A0b, C0b, _, pairb = blocks(s, t0)
        _, C0c, _, _ = blocks(t0, t1)
        rep.zero("C0bar independent of s", C0c - C0b, where)
        rep.cone("A0bar(s, t)^T nondecreasing in t", np.swapaxes(A0 - A0b, -1, -2), ConeTag.MHAT_PLUS, where)
        rep.cone("A1bar(s, t)^T nondecreasing in t", np.swapaxes(pair["y"] - pairb["y"], -1, -2),
                 ConeTag.MHAT_PLUS, where)
    for i in range(grid.N + 1):
        rep.cone("psi nonnegative", as_particle_array(p.psi(i), M, n), ConeTag.MHAT_PLUS, f"t={grid.nodes[i]:.4g}")


def z_free(p: BackwardProblem, grid: TimeGrid, samples: int = 8, seed: int = 0) -> bool:
    """True when the generator ignores Z(t,s) and Z(s,t): declared and probed."""
    if isinstance(p, LinearBackwardProblem):
        c = p.coeffs
        return all(getattr(c, nm) is None for nm in ("B0", "C0", "B1", "C1"))
    if p.depends_on & {"z", "zhat"}:
        return False
    rng = np.random.default_rng(seed)
    y = rng.normal(scale=2.0, size=(samples, p.n))
    for s, t0, t1 in _triples(grid, 4, rng):
        d = _backward_parts(p, grid.nodes[t0], grid.nodes[t1], y)
        for name in ("g_z", "g_zhat", "theta_z", "theta_z'", "theta_zhat", "theta_zhat'"):
            v = d.get(name)
            if v is not None and np.abs(v).max() > HYPOTHESIS_TOL:
                return False
    return True


def _validate_t59(spec, grid, ensemble, triples, rng, states, rep):
    p0, p1 = (_backward_generic(q, grid) for q in spec)
    n = p0.n
    for p in (p0, p1):
        if not z_free(p, grid):
            rep.record("generator free of Z", -1.0, f"problem {p.name or '?'} uses Z")
    y = _sample_states(n, 12, rng, states)
    K = y.shape[0]
    M = ensemble.M if ensemble is not None else 1
    S = np.concatenate([y, np.zeros_like(y), np.zeros_like(y)], axis=1)
    X, XP = np.repeat(S, K, axis=0), np.tile(S, (K, 1))
    for s, t0, t1 in triples:
        t, u = grid.nodes[t0], grid.nodes[t1]
        where = f"t={t:.4g}, s={u:.4g}"
        d = _backward_parts(p0, t, u, y)
        rep.cone("g0_y in MhatPlus", d["g_y"], ConeTag.MHAT_PLUS, where)
        if d["g_gamma"] is not None:
            rep.cone("g0_gamma in MhatPlus", d["g_gamma"], ConeTag.MHAT_PLUS, where)
            rep.cone("theta0_y in MhatPlus", d["theta_y"], ConeTag.MHAT_PLUS, where)
            rep.cone("theta0_y' in MhatPlus", d["theta_y'"], ConeTag.MHAT_PLUS, where)
        th0 = _kernel_value(p0.theta, t, u, X, XP) if p0.theta is not None else None
        th1 = _kernel_value(p1.theta, t, u, X, XP) if p1.theta is not None else None
        if th0 is not None or th1 is not None:
            if th0 is None or th1 is None or th0.shape != th1.shape:
                rep.record("kernels comparable", -1.0, where)
            else:
                rep.cone("theta1 >= theta0", th1 - th0, ConeTag.MHAT_PLUS, where)
        gam = pair_average(p1.theta, "prime", t, u, S) if p1.theta is not None else None
        z = np.zeros_like(y)
        g1 = p1.g(t, u, y, z, z, gam) if p1.g is not None else 0.0
        g0 = p0.g(t, u, y, z, z, gam) if p0.g is not None else 0.0
        rep.cone("g1 >= g0", np.broadcast_to(np.asarray(g1, float) - np.asarray(g0, float), (K, n)),
                 ConeTag.MHAT_PLUS, where)
    for i in range(grid.N + 1):
        rep.cone("psi1 >= psi0", as_particle_array(p1.psi(i), M, n) - as_particle_array(p0.psi(i), M, n),
                 ConeTag.MHAT_PLUS, f"t={grid.nodes[i]:.4g}")


# ---------------------------------------------------------------------------
# ordering checks
# ---------------------------------------------------------------------------


@dataclass
class ComparisonReport:
    instance: str
    theorem: str
    nodes: np.ndarray
    worst: np.ndarray          # per node, most negative component of the mean ordered difference
    tolerance: np.ndarray      # per node, 3 SE + C dt
    pathwise_worst: np.ndarray  # per node, most negative particle value of the ordered difference
    hypotheses: HypothesisReport | None = None
    profile: np.ndarray | None = None  # mean ordered difference, (N + 1, n)

    @property
    def violating_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.worst < -self.tolerance)

    @property
    def passed(self) -> bool:
        return self.violating_nodes.size == 0

    @property
    def verdict(self) -> str:
        return "pass" if self.passed else "fail"

    def rows(self):
        for i, t in enumerate(self.nodes):
            ok = self.worst[i] >= -self.tolerance[i]
            yield {"instance": self.instance, "theorem": self.theorem, "node": i, "t": t,
                   "worst_violation": self.worst[i], "tolerance": self.tolerance[i],
                   "verdict": "pass" if ok else "fail"}

    def text(self) -> str:
        head = (f"{self.instance} [{self.theorem}]: {self.verdict}; min mean difference {self.worst.min():.4g}, "
                f"min pathwise difference {self.pathwise_worst.min():.4g}")
        if not self.passed:
            v = self.violating_nodes
            head += f"; violated at {v.size} nodes in t = [{self.nodes[v[0]]:.4g}, {self.nodes[v[-1]]:.4g}]"
        return head


def ordering_report(diff: np.ndarray, grid: TimeGrid, instance: str, theorem: str, C: float = DEFAULT_C,
                    hypotheses: HypothesisReport | None = None) -> ComparisonReport:
    """Report for an ordered difference ``diff`` (M, N + 1, n) that should be nonnegative."""
    mean = diff.mean(axis=0)
    se = standard_error(diff, axis=0)
    k = np.argmin(mean, axis=1)
    worst = mean[np.arange(mean.shape[0]), k]
    tol = 3.0 * se[np.arange(se.shape[0]), k] + C * grid.dt
    return ComparisonReport(instance, theorem, grid.nodes.copy(), worst, tol, diff.min(axis=(0, 2)), hypotheses,
                            mean)


def compare_forward(p0: ForwardProblem | None, p1: ForwardProblem, grid: TimeGrid, ensemble: PathEnsemble,
                    theorem: str = "T5.7", C: float = DEFAULT_C, validate: bool = True,
                    instance: str = "") -> ComparisonReport:
    """Solve with common random numbers and check the ordering claimed by ``theorem``.

    T5.7 checks X1 - X0 >= 0 (``p0`` required).  P5.3 and P5.6 check X1 >= 0,
    P5.5 checks X1 - phi >= 0 (``p0`` ignored).
    """
    if theorem not in ("P5.3", "P5.5", "P5.6", "T5.7"):
        raise InvalidArgument(f"{theorem!r} is not a forward comparison result")
    X1 = solve_mf_fsvie(p1, grid, ensemble).X
    hyp = None
    if theorem == "T5.7":
        if p0 is None:
            raise InvalidArgument("T5.7 compares two problems; p0 is missing")
        diff = X1 - solve_mf_fsvie(p0, grid, ensemble).X
        if validate:
            hyp = validate_hypotheses((p0, p1), theorem, grid, ensemble)
    else:
        diff = X1
        if theorem == "P5.5":
            phi = np.stack([as_particle_array(p1.phi(i), ensemble.M, p1.n) for i in range(grid.N + 1)], axis=1)
            diff = X1 - phi
        if validate:
            hyp = validate_hypotheses(p1, theorem, grid, ensemble)
    return ordering_report(diff, grid, instance or p1.name, theorem, C, hyp)


def conditional_tail(Y: np.ndarray, grid: TimeGrid, regressor: Regressor) -> np.ndarray:
    """Regression estimate of E[int_t^T Y(s) ds | F_t] at every node (right-endpoint sum)."""
    dt = grid.dt
    tail = np.zeros_like(Y)
    acc = np.zeros_like(Y[:, 0])
    for i in range(grid.N - 1, -1, -1):
        acc = acc + Y[:, i + 1] * dt
        tail[:, i] = regressor.project(acc, i)
    return tail


def compare_backward(p0: BackwardProblem | None, p1: BackwardProblem, grid: TimeGrid, ensemble: PathEnsemble,
                     theorem: str = "T5.9", C: float = DEFAULT_C, basis: RegressionBasis | None = None,
                     features=None, tol: float = 1e-6, max_iter: int = 10, validate: bool = True,
                     instance: str = "") -> ComparisonReport:
    """T5.9: Y1 - Y0 >= 0 for Z-free generators.  T5.8: E[int_t^T Y1 ds | F_t] >= 0 (``p0`` ignored)."""
    if theorem not in ("T5.8", "T5.9"):
        raise InvalidArgument(f"{theorem!r} is not a backward comparison result")
    reg = Regressor(ensemble, basis or RegressionBasis(), features)
    if theorem == "T5.9":
        if p0 is None:
            raise InvalidArgument("T5.9 compares two problems; p0 is missing")
        for p in (p0, p1):
            if not z_free(p, grid):
                raise UnsupportedStructure(f"T5.9 needs generators free of Z; {p.name or 'problem'} uses Z")
        Y1 = solve_mf_bsvie_picard(p1, grid, ensemble, tol=tol, max_iter=max_iter, regressor=reg)[0].Y
        Y0 = solve_mf_bsvie_picard(p0, grid, ensemble, tol=tol, max_iter=max_iter, regressor=reg)[0].Y
        diff = Y1 - Y0
        hyp = validate_hypotheses((p0, p1), theorem, grid, ensemble) if validate else None
        return ordering_report(diff, grid, instance or p1.name, theorem, C, hyp)
    if isinstance(p1, LinearBackwardProblem):
        c = p1.coeffs
        if any(getattr(c, nm) is not None for nm in ("B0", "B1", "C1")):
            raise UnsupportedStructure("T5.8 needs the linear form without Z(t,s) and without Z(s,t) in the nonlocal term")
    sol = solve_mf_bsvie_picard(p1, grid, ensemble, tol=tol, max_iter=max_iter, regressor=reg)[0]
    tail = conditional_tail(sol.Y, grid, reg)
    hyp = validate_hypotheses(p1, theorem, grid, ensemble) if validate else None
    # pathwise check of the fitted conditional tail; its noise is that of a fitted value
    p = reg._basis(0).shape[1]
    rep = ordering_report(tail, grid, instance or p1.name, theorem, C, hyp)
    k = tail.min(axis=0).argmin(axis=1)
    worst = tail.min(axis=0)[np.arange(grid.N + 1), k]
    sd = tail.std(axis=0)[np.arange(grid.N + 1), k]
    rep.worst = worst
    rep.tolerance = 3.0 * sd * np.sqrt(max(p, 1) / ensemble.M) + C * grid.dt
    return rep


# ---------------------------------------------------------------------------
# counterexamples
# ---------------------------------------------------------------------------


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


@dataclass
class CounterexampleEntry:
    name: str
    statistic: float
    reference: float
    violation_found: bool
    detail: str = ""
    within_reference: bool = True


@dataclass
class CounterexampleReport:
    entries: list = field(default_factory=list)

    @property
    def all_violations_found(self) -> bool:
        return all(e.violation_found for e in self.entries)

    @property
    def passed(self) -> bool:
        return all(e.violation_found and e.within_reference for e in self.entries)

    def entry(self, name) -> CounterexampleEntry:
        return next(e for e in self.entries if e.name == name)

    def rows(self):
        for e in self.entries:
            yield {"instance": e.name, "statistic": e.statistic, "reference": e.reference,
                   "violation_found": e.violation_found, "within_reference": e.within_reference}

    def text(self) -> str:
        return "\n".join(f"{e.name}: {'violation found' if e.violation_found else 'NO VIOLATION'}"
                         f"{'' if e.within_reference else ' (off reference)'}; {e.detail}" for e in self.entries)


def example_5_2_negative_fraction(grid: TimeGrid, ensemble: PathEnsemble, t: float = 1.0) -> CounterexampleEntry:
    """Fraction of particles with X(t) < 0 for X = 1 + int E[X] dW; the reference is Phi(-sqrt(t))."""
    i = grid.index_of(t)
    X = solve_mf_fsvie(example_5_2_problem(), grid, ensemble).X[:, i, 0]
    frac = float(np.mean(X < 0))
    ref = normal_cdf(-1.0 / math.sqrt(grid.nodes[i]))
    se = math.sqrt(ref * (1 - ref) / ensemble.M)
    exact = float(np.mean(closed_form_example_5_2(grid, ensemble).X[:, i, 0] < 0))
    return CounterexampleEntry("example-5.2", frac, ref, frac > 0.01,
                               f"P(X({grid.nodes[i]:.3g}) < 0) = {frac:.4f} (closed form {exact:.4f}), "
                               f"reference {ref:.4f} +- {3 * se:.4f}", abs(frac - ref) <= 3 * se)


def example_5_4_terminal(grid: TimeGrid, ensemble: PathEnsemble, b: float = -1.0, sigma: float = 0.0
                         ) -> CounterexampleEntry:
    X = solve_mf_fsvie(example_5_4(b, sigma, grid), grid, ensemble).X[:, -1, 0]
    exact = closed_form_example_5_4(b, sigma, grid, ensemble).X[:, -1, 0]
    if sigma == 0:
        stat, ref = float(X.mean()), float(exact.mean())
        found = stat < 0 and ref < 0
        detail = f"X(T) = {stat:.5f} (closed form {ref:.5f}) with nonnegative free term T - t"
        return CounterexampleEntry(f"example-5.4(b={b:g},sigma=0)", stat, ref, found, detail,
                                   abs(stat - ref) <= DEFAULT_C * grid.dt)
    frac, ref = float(np.mean(X < 0)), float(np.mean(exact < 0))
    return CounterexampleEntry(f"example-5.4(b={b:g},sigma={sigma:g})", frac, ref, frac > 0.01,
                               f"P(X(T) < 0) = {frac:.4f} (closed form {ref:.4f})")


def example_5_10_sign_change(grid: TimeGrid, ensemble: PathEnsemble, C: float = DEFAULT_C
                             ) -> tuple[CounterexampleEntry, ComparisonReport]:
    """Y1 < Y0 = 0 on [0, T - ln(T + 1)): the ordering claimed without monotonicity fails."""
    p0, p1 = example_5_10(grid)
    rep = compare_backward(p0, p1, grid, ensemble, "T5.9", C=C, instance="example-5.10")
    T = grid.T
    edge = T - math.log(T + 1)
    # the mean profile of Y1 - Y0 crosses zero between two nodes; interpolate
    diffs = rep.profile[:, 0]
    cross = _first_crossing(grid.nodes, diffs)
    nodes = grid.nodes
    before = nodes < edge - 2 * grid.dt
    after = nodes > edge + 2 * grid.dt
    pattern = bool(np.all(diffs[before] < 0) and np.all(diffs[after] > 0))
    located = cross is not None and abs(cross - edge) <= 2 * grid.dt
    exact = np.subtract(*closed_form_example_5_10(nodes, T)[::-1])
    detail = (f"Y1 - Y0 changes sign at t = {cross if cross is not None else float('nan'):.4f} "
              f"(exact {edge:.4f}); max |(Y1 - Y0) - closed form| = {np.abs(diffs - exact).max():.2e}")
    return CounterexampleEntry("example-5.10", cross if cross is not None else float("nan"), edge,
                               (not rep.passed) and pattern, detail, located), rep


def _first_crossing(t, v):
    idx = np.flatnonzero((v[:-1] < 0) & (v[1:] >= 0))
    if idx.size == 0:
        return None
    k = idx[0]
    return float(t[k] - v[k] * (t[k + 1] - t[k]) / (v[k + 1] - v[k]))


def _observation(name, c: LinearForwardCoeffs, x0, grid, ensemble, component) -> CounterexampleEntry:
    X = solve_linear_fsvie(c, lambda i: x0, grid, ensemble).X
    comp = X[:, :, component]
    hyp = validate_hypotheses(c, "P5.3", grid, ensemble, phi=lambda i: x0)
    frac = float(np.mean(comp.min(axis=1) < 0))
    worst = float(comp.min())
    found = worst < -1e-12 and frac > 0.01
    flagged = ", ".join(v.name for v in hyp.violations) or "none"
    return CounterexampleEntry(name, worst, 0.0, found,
                               f"min X_{component} = {worst:.4g}, fraction of paths going negative {frac:.3f}; "
                               f"violated hypotheses: {flagged}", not hyp.passed)


def observations(grid: TimeGrid, ensemble: PathEnsemble) -> list[CounterexampleEntry]:
    """The four remarks showing the cone conditions of the linear SDE comparison are sharp."""
    e0 = np.array([1.0, 0.0])
    neg = np.array([[0.0, 0.0], [-1.0, 0.0]])
    off = np.array([[0.0, 0.0], [1.0, 0.0]])
    out = [
        _observation("observation-1", LinearForwardCoeffs(2, A0=lambda i, j: neg), e0, grid, ensemble, 1),
        _observation("observation-2", LinearForwardCoeffs(2, C0=lambda i, j: PairMatrix.constant(neg)), e0, grid,
                     ensemble, 1),
        _observation("observation-3", LinearForwardCoeffs(2, A1=lambda i, j: off), e0, grid, ensemble, 1),
    ]
    # n = 1, C0(s, w, w') = c(s, w) adapted with mean zero: X = 1 + int c ds
    c = 4.0 * np.tanh(ensemble.W)
    obs4 = LinearForwardCoeffs(1, C0=lambda i, j: PairMatrix(L=c[:, j].reshape(-1, 1, 1), R=np.ones((1, 1, 1))),
                               path_dependent=frozenset({"C0"}))
    out.append(_observation("observation-4", obs4, np.array([1.0]), grid, ensemble, 0))
    return out


def counterexample_suite(grid: TimeGrid, ensemble: PathEnsemble) -> CounterexampleReport:
    """Run every counterexample; each must exhibit its violation."""
    rep = CounterexampleReport()
    rep.entries.append(example_5_2_negative_fraction(grid, ensemble, t=min(1.0, grid.T)))
    rep.entries.append(example_5_4_terminal(grid, ensemble, b=-1.0, sigma=0.0))
    rep.entries.append(example_5_4_terminal(grid, ensemble, b=0.0, sigma=1.0))
    rep.entries.append(example_5_10_sign_change(grid, ensemble)[0])
    rep.entries.extend(observations(grid, ensemble))
    return rep
