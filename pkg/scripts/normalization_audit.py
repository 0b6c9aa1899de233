"""Riemann-sum mass of a trained 2-D model across solver tolerances.

    python scripts/normalization_audit.py --checkpoint runs/two_gaussians/checkpoint.ffj
"""

import argparse
import time

from ffjord import cnf
from ffjord.cli import load_model
from ffjord.odesolve import StepController


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--resolution", type=int, default=2000)
    p.add_argument("--tols", default="1e-3,1e-5,1e-8")
    p.add_argument("--batch-size", type=int, default=50_000)
    args = p.parse_args()

    model, _, _ = load_model(args.checkpoint)
    print("tol        mass          |1-mass|      nfe   seconds")
    for tol in (float(v) for v in args.tols.split(",")):
        start = time.time()
        grid = cnf.density_grid(model, (-4, 4, -4, 4), args.resolution,
                                controller=StepController.with_tol(tol), batch_size=args.batch_size)
        print(f"{tol:<10.0e} {grid.mass:.10f}  {abs(1 - grid.mass):.3e}  {grid.nfe:5d}  {time.time() - start:.0f}")


if __name__ == "__main__":
    main()
