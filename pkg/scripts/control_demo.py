"""Projected-gradient optimisation of the LQ toy, as a full adapted field and as two pieces.

Prints the optimisation trace, the certificate and the 2-piece brute-force optimum.
"""
import argparse
from dataclasses import dataclass

import numpy as np

from mfsvie.control import PiecewiseConstant, brute_force_piecewise, constant_control, lq_toy, optimize
from mfsvie.core import RegressionBasis, build_grid, sample_ensemble


@dataclass
class Config:
    T: float = 1.0
    N: int = 25
    M: int = 2000
    seed: int = 11
    levels: int = 41


def report(name, out):
    print(f"{name}: J* = {out.J:.6f} +- {out.se:.1e}, certificate {out.certificate:.2e} "
          f"(scale {out.scale:.2e}), {out.iterations} iterations, converged {out.converged}")
    for it, J, se, step, cert in out.trace:
        print(f"  {it:3d}  J {J:.6f}  step {step:8.3g}  certificate {cert:.3e}")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--particles", type=int, default=Config.M)
    args = ap.parse_args(argv)
    cfg = Config(M=args.particles)
    grid = build_grid(cfg.T, cfg.N)
    ens = sample_ensemble(grid, cfg.M, cfg.seed)
    p = lq_toy()
    full = optimize(p, constant_control(0.0, p, grid, ens.M), grid, ens, basis=RegressionBasis(degree=3))
    report("adapted field", full)
    print("  u*(t) mean:", np.round(full.u[:, :grid.N, 0].mean(axis=0), 3).tolist())
    par = PiecewiseConstant(grid, 2)
    two = optimize(p, np.zeros((2, 1)), grid, ens, parameterisation=par)
    report("two pieces", two)
    theta, J, se, _ = brute_force_piecewise(p, par, grid, sample_ensemble(grid, 16, cfg.seed), cfg.levels)
    print(f"brute force {cfg.levels}x{cfg.levels}: J = {J:.6f} at {np.round(theta.ravel(), 4).tolist()}, "
          f"optimiser at {np.round(two.theta.ravel(), 4).tolist()}")


if __name__ == "__main__":
    main()
