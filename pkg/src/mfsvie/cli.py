"""Command line front end: ``mfsvie run <file>``, ``mfsvie list-builtins``, ``mfsvie version``."""
from __future__ import annotations

import argparse
import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

EXIT_OK, EXIT_FAIL, EXIT_ERROR = 0, 1, 2


class StageError(Exception):
    def __init__(self, stage, exc):
        self.stage = stage
        self.exc = exc
        super().__init__(f"stage '{stage}' failed: {type(exc).__name__}: {exc}")


@contextmanager
def stage(name):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:  # any solver failure is reported with the stage it happened in
        raise StageError(name, exc) from exc


@dataclass
class RunResult:
    spec: object
    checks: list = field(default_factory=list)
    artifacts: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def status(self) -> int:
        return EXIT_OK if self.passed else EXIT_FAIL

    def add(self, name, passed, detail=""):
        from .acceptance import Check
        self.checks.append(Check(name, bool(passed), detail))

    def report(self) -> str:
        s = self.spec
        lines = [f"scenario {s.name} (kind {s.kind}{', built-in ' + s.builtin if s.builtin else ''})",
                 f"grid T={s.T:g} N={s.N}, particles M={s.M}, seed {s.seed}", ""]
        lines += self.notes
        if self.notes:
            lines.append("")
        if not self.checks:
            lines.append("no assertions")
        for c in self.checks:
            lines.append(f"[{'ok' if c.passed else 'FAIL'}] {c.name}: {c.detail}")
        lines += ["", f"verdict: {'PASS' if self.passed else 'FAIL'}"]
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# runners, one per kind
# ---------------------------------------------------------------------------


def _setup(spec):
    from .core import build_grid, sample_ensemble
    grid = build_grid(spec.T, spec.N)
    return grid, sample_ensemble(grid, spec.M, spec.seed)


def _C(spec):
    from .comparison import DEFAULT_C
    return spec.C if spec.C is not None else DEFAULT_C


def _inline_forward(spec, grid):
    from .core import PairMatrix
    from .forward import LinearForwardCoeffs
    nodes, n, inl = grid.nodes, spec.n, spec.inline

    def local(e):
        return None if e is None else (lambda i, j: e.matrix(n, t=nodes[i], s=nodes[j]))

    def pair(e):
        return None if e is None else (lambda i, j: PairMatrix.constant(e.matrix(n, t=nodes[i], s=nodes[j])))

    c = LinearForwardCoeffs(n, A0=local(inl.get("A0")), A1=local(inl.get("A1")), C0=pair(inl.get("C0")),
                            C1=pair(inl.get("C1")))
    phi = inl["phi"]
    return c, (lambda i: phi.vector(n, t=nodes[i]))


def _inline_psi(spec, grid, ens):
    psi, n, W = spec.inline["psi"], spec.n, ens.W
    return lambda i: psi.vector(n, t=grid.nodes[i], W=W[:, i], WT=W[:, -1])


def run_forward(spec, res: RunResult):
    import numpy as np
    from .forward import (closed_form_example_5_2, closed_form_example_5_4, example_5_2_problem, example_5_4,
                          solve_linear_fsvie, solve_mf_fsvie)
    from .io import STATE_COLUMNS, csv_text, particle_rows
    grid, ens = _setup(spec)
    exact = None
    with stage("forward solve"):
        if spec.builtin == "example-5.2":
            sol = solve_mf_fsvie(example_5_2_problem(), grid, ens)
            exact = closed_form_example_5_2(grid, ens)
        elif spec.builtin == "example-5.4":
            b, sigma = spec.params.get("b", -1.0), spec.params.get("sigma", 0.0)
            sol = solve_mf_fsvie(example_5_4(b, sigma, grid), grid, ens)
            exact = closed_form_example_5_4(b, sigma, grid, ens)
        else:
            c, phi = _inline_forward(spec, grid)
            sol = solve_linear_fsvie(c, phi, grid, ens)
    if exact is not None:
        from .core import standard_error
        d = sol.X - exact.X
        err = np.abs(d.mean(axis=0)).max(axis=1)
        tol = 3 * standard_error(d, axis=0).max(axis=1) + _C(spec) * grid.dt
        res.add("closed form", np.all(err <= tol), f"max |mean(X - closed form)| = {err.max():.3e}, "
                f"tolerance 3 SE + C dt >= {tol.min():.3e}")
    res.artifacts["state.csv"] = csv_text(sol.summary_rows(), STATE_COLUMNS)
    if spec.per_particle:
        res.artifacts["particles.csv"] = csv_text(particle_rows(sol.X, grid),
                                                  ("particle", "i", "t", "component", "value"))
    res.notes.append(f"X(T) mean {np.array2string(sol.mean[-1], precision=6)}, sd "
                     f"{np.array2string(sol.sd[-1], precision=6)}")


def run_backward(spec, res: RunResult):
    import numpy as np
    from . import builtins as bi
    from .backward import (LinearBackwardCoeffs, closed_form_example_3_3, closed_form_example_5_10,
                           deterministic_volterra_solve, example_3_3, example_5_10, solve_linear_bsvie,
                           solve_mf_bsvie_picard, verify_m_condition)
    from .core import PairMatrix, RegressionBasis, Regressor, standard_error
    from .io import MSOLUTION_COLUMNS, csv_text, msolution_rows, z_slice_rows
    grid, ens = _setup(spec)
    kw = dict(tol=spec.tol, max_iter=spec.max_iter, beta=spec.beta)
    basis = RegressionBasis(degree=spec.degree)
    C = _C(spec)
    with stage("picard iteration"):
        if spec.builtin == "example-3.3":
            p, F = example_3_3(grid, ens)
            sol, rep = solve_mf_bsvie_picard(p, grid, ens, RegressionBasis("state", spec.degree), features=F, **kw)
        elif spec.builtin == "example-5.10":
            _, p1 = example_5_10(grid)
            sol, rep = solve_mf_bsvie_picard(p1, grid, ens, basis, **kw)
        elif spec.builtin == "linear-deterministic":
            c, psi = bi.linear_deterministic()
            sol, rep = solve_linear_bsvie(c, lambda i: psi, grid, ens, basis, **kw)
        elif spec.builtin == "conditional-expectation":
            p = bi.conditional_expectation_problem(ens)
            reg = Regressor(ens, RegressionBasis("W", spec.degree, anchor=spec.degree))
            sol, rep = solve_mf_bsvie_picard(p, grid, ens, regressor=reg, **kw)
        else:
            nodes, n, inl = grid.nodes, spec.n, spec.inline

            def local(e):
                return None if e is None else (lambda i, j: e.matrix(n, t=nodes[i], s=nodes[j]))

            def pair(e):
                return None if e is None else (lambda i, j: PairMatrix.constant(e.matrix(n, t=nodes[i], s=nodes[j])))

            c = LinearBackwardCoeffs(n, **{k: local(inl.get(k)) for k in ("A0", "B0", "C0")},
                                     **{k: pair(inl.get(k)) for k in ("A1", "B1", "C1")})
            sol, rep = solve_linear_bsvie(c, _inline_psi(spec, grid, ens), grid, ens, basis, **kw)
    t = grid.nodes
    meanY, seY = sol.Y.mean(axis=0)[:, 0], standard_error(sol.Y[:, :, 0], axis=0)
    if spec.builtin == "example-3.3":
        Yc, Zc = closed_form_example_3_3(grid, ens)
        err = np.abs(meanY - t * (grid.T - t))
        res.add("mean profile", np.all(err <= 3 * seY + 0.05), f"max |mean Y - t(T - t)| = {err.max():.4f}")
        mse = float(np.mean((sol.Z[:, :, :, 0] - Zc[None]) ** 2))
        res.add("Z(t,s) = s", mse <= 0.05, f"mean-square error {mse:.4f} <= 0.05")
    elif spec.builtin == "example-5.10":
        err = np.abs(meanY - closed_form_example_5_10(t, grid.T)[1])
        res.add("closed form", np.all(err <= 3 * seY + C * grid.dt), f"max |Y1 - (e^(t-T)(T+1) - 1)| = {err.max():.3e}"
                f" <= C dt = {C * grid.dt:.3e}")
    elif spec.builtin == "linear-deterministic":
        ref = deterministic_volterra_solve(lambda i, j: 1.0, lambda i: 1.0, grid)[:, 0]
        err = np.abs(meanY - ref)
        res.add("Volterra oracle", np.all(err <= 3 * seY + C * grid.dt), f"max |mean Y - oracle| = {err.max():.4f}")
    elif spec.builtin == "conditional-expectation":
        oracle = np.stack([reg.project(p.psi(i), i) for i in range(grid.N + 1)], axis=1)
        d = float(np.abs(sol.Y - oracle).max())
        res.add("conditional expectation", d < 1e-8, f"max |Y - E[psi | F_t]| = {d:.2e}")
    res.add("picard converged", rep.converged, f"{rep.iterations} iterations, final distance {rep.final_residual:.2e}")
    mc = verify_m_condition(sol, ens)
    res.add("M-condition", mc.passed, f"{len(mc.flagged)} flagged nodes, max residual {mc.residual.max():.3e}")
    res.artifacts["msolution.csv"] = csv_text(msolution_rows(sol, grid), MSOLUTION_COLUMNS)
    res.artifacts["z_terminal.csv"] = csv_text(z_slice_rows(sol, grid, grid.N),
                                               ("i", "j", "s", "component", "meanZ", "sdZ"))
    res.artifacts["picard.csv"] = csv_text(
        ({"iteration": k + 1, "distance": d, "beta": b} for k, (d, b) in enumerate(zip(rep.distances, rep.betas))),
        ("iteration", "distance", "beta"))


def run_duality(spec, res: RunResult):
    from . import builtins as bi
    from .acceptance import duality_bias_constant
    from .backward import solve_linear_bsvie
    from .core import RegressionBasis
    from .duality import build_fsvie_adjoint, check_twice_adjoint, duality_pairing
    from .forward import solve_linear_fsvie
    from .io import DUALITY_COLUMNS, csv_text
    grid, ens = _setup(spec)
    basis = RegressionBasis(degree=spec.degree)
    if spec.builtin in ("twice-adjoint-forward", "twice-adjoint-backward"):
        with stage("twice adjoint"):
            if spec.builtin == "twice-adjoint-forward":
                rep = check_twice_adjoint(bi.twice_adjoint_forward(spec.params.get("seed", 0), grid), grid, ens)
                res.add("round trip exact", rep.equal, ", ".join(f"{k}: {v:.1e}" for k, v in rep.max_difference.items()))
                rows = [{"block": k, "discrepancy": v, "noise_floor": 0.0} for k, v in rep.max_difference.items()]
            else:
                rep = check_twice_adjoint(bi.twice_adjoint_backward(ens), grid, ens, basis)
                ratio = rep.ratio("C0")
                res.add("round trip loses information", ratio >= 10,
                        f"discrepancy {rep.discrepancy['C0']:.4f} = {ratio:.1f} x noise floor")
                rows = [{"block": k, "discrepancy": v, "noise_floor": rep.noise_floor[k]}
                        for k, v in rep.discrepancy.items()]
        res.artifacts["twice_adjoint.csv"] = csv_text(rows, ("block", "discrepancy", "noise_floor"))
        return
    exact = None
    if spec.builtin == "scalar":
        a = spec.params.get("a", 1.0)
        c, phi, psi = bi.scalar_duality(a)
        exact = bi.scalar_duality_value(a, grid.T)
    elif spec.builtin == "random":
        c, phi, psi = bi.random_duality(spec.params.get("seed", 1), grid, ens)
    else:
        c, phi = _inline_forward(spec, grid)
        psi = _inline_psi(spec, grid, ens)
    C = spec.C if spec.C is not None else duality_bias_constant(grid.T)
    with stage("forward solve"):
        X = solve_linear_fsvie(c, phi, grid, ens)
    with stage("adjoint solve"):
        Y, prep = solve_linear_bsvie(build_fsvie_adjoint(c), psi, grid, ens, basis, tol=spec.tol,
                                     max_iter=max(spec.max_iter, 15), beta=spec.beta)
    rep = duality_pairing(X, psi, Y, phi, grid, bias=C * grid.dt)
    res.notes.append(rep.text())
    res.add("duality identity", rep.passed, f"|lhs - rhs| = {abs(rep.lhs - rep.rhs):.3e} <= {rep.tolerance:.3e}")
    if exact is not None:
        ok = max(abs(rep.lhs - exact), abs(rep.rhs - exact)) <= rep.tolerance
        res.add("analytic value", ok, f"lhs {rep.lhs:.6f}, rhs {rep.rhs:.6f}, (e^(aT) - 1)/a = {exact:.6f}")
    res.artifacts["duality.csv"] = csv_text([rep.row()], DUALITY_COLUMNS)


def _expect(spec, default):
    return (spec.expect or default) == "violation"


def run_compare(spec, res: RunResult):
    from . import builtins as bi
    from . import comparison as cm
    from .io import COMPARISON_COLUMNS, csv_text
    grid, ens = _setup(spec)
    C = _C(spec)
    kw = dict(tol=spec.tol, max_iter=spec.max_iter)
    name = spec.builtin
    if name.startswith("positive-"):
        with stage("comparison"):
            if name == "positive-5.5":
                rep = cm.compare_forward(None, bi.positive_5_5(grid), grid, ens, "P5.5", C)
            elif name == "positive-5.7":
                rep = cm.compare_forward(*bi.positive_5_7(), grid, ens, "T5.7", C)
            elif name == "positive-5.9":
                rep = cm.compare_backward(*bi.positive_5_9(ens), grid, ens, "T5.9", C, **kw)
            else:
                rep = cm.compare_backward(None, bi.positive_5_8(ens), grid, ens, "T5.8", C, **kw)
        want_violation = _expect(spec, "pass")
        ordered = rep.passed and (rep.hypotheses is None or rep.hypotheses.passed)
        res.notes.append(rep.text())
        if rep.hypotheses is not None:
            res.notes.append(rep.hypotheses.text())
        res.add(f"ordering {'fails' if want_violation else 'holds'}", ordered != want_violation,
                f"{len(rep.violating_nodes)} violating nodes")
        res.artifacts["comparison.csv"] = csv_text(rep.rows(), COMPARISON_COLUMNS)
        return
    with stage("counterexample"):
        if name == "counterexamples":
            entries = cm.counterexample_suite(grid, ens).entries
        elif name == "example-5.2-negative":
            entries = [cm.example_5_2_negative_fraction(grid, ens, t=min(1.0, grid.T))]
        elif name == "example-5.4-negative":
            entries = [cm.example_5_4_terminal(grid, ens, spec.params.get("b", -1.0), spec.params.get("sigma", 0.0))]
        else:
            entry, rep = cm.example_5_10_sign_change(grid, ens, C)
            entries = [entry]
            res.artifacts["comparison.csv"] = csv_text(rep.rows(), COMPARISON_COLUMNS)
    want_violation = _expect(spec, "violation")
    for e in entries:
        found = e.violation_found and e.within_reference
        res.add(e.name, found == want_violation, ("violation found; " if e.violation_found else "no violation; ")
                + e.detail)
    rep = cm.CounterexampleReport(entries)
    res.artifacts["counterexamples.csv"] = csv_text(rep.rows(), ("instance", "statistic", "reference",
                                                                 "violation_found", "within_reference"))


def run_control(spec, res: RunResult):
    import numpy as np
    from .acceptance import GRADIENT_COLUMNS, gradient_check
    from .control import PiecewiseConstant, brute_force_piecewise, grid_resolution, lq_toy, optimize
    from .core import RegressionBasis, sample_ensemble
    from .io import TRACE_COLUMNS, csv_text
    grid, ens = _setup(spec)
    p = lq_toy(spec.params.get("lower", -1.0), spec.params.get("upper", 1.0))
    with stage("gradient check"):
        rows = gradient_check(p, grid, ens, spec.degree, levels=(0.0,))
    worst = max(r["relative_error"] for r in rows)
    res.add("adjoint gradient vs finite differences", worst < 0.02, f"max relative error {worst:.2e}")
    res.artifacts["gradient_check.csv"] = csv_text(rows, GRADIENT_COLUMNS)
    pieces = spec.params.get("pieces", 2)
    par = PiecewiseConstant(grid, pieces) if pieces > 0 else None
    init = np.zeros((pieces, p.m)) if par else np.zeros((ens.M, grid.N + 1, p.m))
    with stage("optimisation"):
        out = optimize(p, init, grid, ens, parameterisation=par, tol=spec.tol if spec.tol >= 1e-4 else 1e-3,
                       basis=RegressionBasis(degree=spec.degree), max_iter=max(spec.max_iter, 50))
    res.notes.append(f"J* = {out.J:.6f} +- {out.se:.1e} after {out.iterations} iterations"
                     + (f", theta = {np.round(out.theta.ravel(), 4).tolist()}" if par else ""))
    res.add("variational certificate", out.certificate >= -1e-2 * out.scale,
            f"certificate {out.certificate:.2e} >= -1e-2 scale(G) = {-1e-2 * out.scale:.2e}")
    res.artifacts["trace.csv"] = csv_text(out.trace_rows(), TRACE_COLUMNS)
    if par is not None and pieces * p.m <= 2:
        with stage("brute force"):
            theta, J, se, table = brute_force_piecewise(p, par, grid, sample_ensemble(grid, min(spec.M, 16), spec.seed),
                                                        levels=spec.params.get("levels", 41))
        tol = 3 * (out.se + se) + grid_resolution(table)
        res.add("brute force agreement", abs(out.J - J) <= tol,
                f"|J* - J_bf| = {abs(out.J - J):.2e} <= {tol:.2e} (brute force at {np.round(theta.ravel(), 4).tolist()})")


def run_suite(spec, res: RunResult):
    from .acceptance import AcceptanceConfig, run_criteria, criterion_10, summary_rows
    from .io import csv_text
    cfg = AcceptanceConfig(T=spec.T, N=spec.N, M=spec.M, seed=spec.seed, degree=spec.degree, tol=spec.tol,
                           max_iter=spec.max_iter, **({"C": spec.C} if spec.C is not None else {}))
    crit = spec.params.get("criteria")
    numbers = [int(x) for x in crit.replace(",", " ").split()] if crit else None
    echo = lambda s: print(s, flush=True)  # noqa: E731
    with stage("acceptance battery"):
        results = run_criteria(cfg, numbers, echo=echo)
        if spec.params.get("determinism", True):
            results.append(criterion_10(cfg, results, echo=echo))
    for r in results:
        res.notes.append(r.text())
        res.add(f"criterion {r.number}", r.passed, r.title)
        res.artifacts.update(r.artifacts)
    res.artifacts["acceptance.csv"] = csv_text(summary_rows(results), ("criterion", "title", "check", "verdict", "detail"))


RUNNERS = {"forward": run_forward, "backward": run_backward, "duality": run_duality, "compare": run_compare,
           "control": run_control, "suite": run_suite}


def run_scenario(spec, out_dir: str | None = None) -> RunResult:
    """Run ``spec``; write its CSV artifacts and report.txt into ``out_dir`` (default: the spec's)."""
    res = RunResult(spec)
    RUNNERS[spec.kind](spec, res)
    out_dir = out_dir or spec.out
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        for name, text in res.artifacts.items():
            with open(os.path.join(out_dir, name), "w", encoding="ascii", newline="") as fh:
                fh.write(text)
        with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
            fh.write(res.report())
    return res


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mfsvie", description="Mean-field stochastic Volterra integral equation scenarios")
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a scenario file")
    run.add_argument("file")
    run.add_argument("--seed", type=int)
    run.add_argument("--particles", type=int, help="override the particle count M")
    run.add_argument("--grid", type=int, help="override the number of time steps N")
    run.add_argument("--threads", type=int, help="BLAS threads (default: machine parallelism)")
    run.add_argument("--out", help="output directory")
    sub.add_parser("list-builtins", help="list the named problems")
    sub.add_parser("version", help="print the version")
    return ap


def _set_threads(k):
    # must happen before numpy is imported for the BLAS pools to honour it
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(k)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "version":
        from . import __version__
        print(f"mfsvie {__version__}")
        return EXIT_OK
    if args.command == "list-builtins":
        from .builtins import BUILTINS
        width = max(len(n) for n in BUILTINS)
        for b in sorted(BUILTINS.values(), key=lambda b: (b.kind, b.name)):
            print(f"{b.name:<{width}}  {b.kind:<8}  {b.description}")
        return EXIT_OK
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be at least 1", file=sys.stderr)
            return EXIT_ERROR
        _set_threads(args.threads)
    from .scenario import ScenarioError, parse_scenario
    try:
        spec = parse_scenario(args.file)
    except ScenarioError as exc:
        print(f"error: invalid scenario\n{exc}", file=sys.stderr)
        return EXIT_ERROR
    overrides = {k: v for k, v in (("seed", args.seed), ("M", args.particles), ("N", args.grid)) if v is not None}
    if any(v < (0 if k == "seed" else 1) for k, v in overrides.items()):
        print("error: --particles and --grid must be positive, --seed nonnegative", file=sys.stderr)
        return EXIT_ERROR
    spec = replace(spec, **overrides)
    try:
        res = run_scenario(spec, args.out)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    sys.stdout.write(res.report())
    return res.status


if __name__ == "__main__":
    sys.exit(main())
