"""Picard distances for the Example 3.3 surrogate and the linear deterministic case.

Prints the beta-weighted M^2 distance per iteration and the successive ratios.
"""
import argparse
from dataclasses import dataclass

from mfsvie import builtins as bi
from mfsvie.backward import example_3_3, solve_linear_bsvie, solve_mf_bsvie_picard
from mfsvie.core import RegressionBasis, build_grid, sample_ensemble


@dataclass
class Config:
    T: float = 1.0
    N: int = 50
    M: int = 10_000
    seed: int = 11
    degree: int = 3
    tol: float = 1e-6
    max_iter: int = 10


def show(name, rep):
    print(f"{name}: {rep.iterations} iterations, converged {rep.converged}, beta {rep.beta:g}")
    for k, d in enumerate(rep.distances, 1):
        ratio = rep.ratios[k - 2] if k > 1 else float("nan")
        print(f"  {k:2d}  {d:.3e}  ratio {ratio:.3f}")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--particles", type=int, default=Config.M)
    ap.add_argument("--grid", type=int, default=Config.N)
    args = ap.parse_args(argv)
    cfg = Config(M=args.particles, N=args.grid)
    grid = build_grid(cfg.T, cfg.N)
    ens = sample_ensemble(grid, cfg.M, cfg.seed)
    p, F = example_3_3(grid, ens)
    _, rep = solve_mf_bsvie_picard(p, grid, ens, RegressionBasis("state", cfg.degree), features=F,
                                   tol=cfg.tol, max_iter=cfg.max_iter)
    show("example-3.3", rep)
    c, psi = bi.linear_deterministic()
    _, rep = solve_linear_bsvie(c, lambda i: psi, grid, ens, RegressionBasis(degree=cfg.degree), tol=cfg.tol,
                                max_iter=cfg.max_iter)
    show("linear-deterministic", rep)


if __name__ == "__main__":
    main()
