"""Terminal error of the forward scheme on Example 5.4 (sigma = 0) as the grid is refined.

The scheme is exact for b = 0; for b != 0 the error should halve with dt.
"""
import argparse

from mfsvie.core import build_grid, sample_ensemble
from mfsvie.forward import closed_form_example_5_4, example_5_4, solve_mf_fsvie


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--T", type=float, default=1.0)
    ap.add_argument("--b", type=float, nargs="*", default=[-1.0, -0.5, 0.5, 1.0])
    ap.add_argument("--grids", type=int, nargs="*", default=[25, 50, 100, 200, 400])
    args = ap.parse_args(argv)
    print(f"{'b':>6} {'N':>5} {'error':>11} {'error/dt':>9} {'ratio':>6}")
    for b in args.b:
        prev = None
        for N in args.grids:
            g = build_grid(args.T, N)
            e = sample_ensemble(g, 1, 0)
            err = abs(solve_mf_fsvie(example_5_4(b, 0.0, g), g, e).X[0, -1, 0]
                      - closed_form_example_5_4(b, 0.0, g, e).X[0, -1, 0])
            ratio = prev / err if prev and err > 0 else float("nan")
            print(f"{b:6.2f} {N:5d} {err:11.3e} {err / g.dt:9.4f} {ratio:6.2f}")
            prev = err


if __name__ == "__main__":
    main()
