"""Run the acceptance battery and write its artifacts.

    python3 scripts/run_acceptance.py --out out/acceptance
    python3 scripts/run_acceptance.py --criteria 1 2 3 --no-determinism
"""
import argparse
import sys
from dataclasses import replace

from mfsvie.acceptance import AcceptanceConfig, run_acceptance


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="out/acceptance")
    ap.add_argument("--criteria", type=int, nargs="*", help="subset of 1..9 (default: all)")
    ap.add_argument("--no-determinism", action="store_true", help="skip the second run (criterion 10)")
    ap.add_argument("--particles", type=int)
    ap.add_argument("--seed", type=int)
    args = ap.parse_args(argv)
    cfg = AcceptanceConfig()
    if args.particles:
        cfg = replace(cfg, M=args.particles)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    results = run_acceptance(cfg, args.out, args.criteria or None, determinism=not args.no_determinism)
    print()
    for res in results:
        print(res.text())
    return 0 if all(r.passed for r in results) else 1


if __name__ == "__main__":
    sys.exit(main())
