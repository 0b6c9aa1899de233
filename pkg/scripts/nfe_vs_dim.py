"""Forward NFE against data dimension, for zero dynamics and for random small-weight nets."""

import argparse

import numpy as np

from ffjord import cnf, models
from ffjord.odesolve import StepController


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--dims", default="2,8,64,256")
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--gain", type=float, default=3.0)
    args = p.parse_args()
    ctrl = StepController.with_tol(args.tol)
    print("dim   nfe(zero)  nfe(random)")
    for d in (int(v) for v in args.dims.split(",")):
        x = np.random.default_rng(d).standard_normal((64, d))
        zero = cnf.CNFModel([models.init(models.NetSpec(d, (64,)), 0)], controller=ctrl)
        spec = models.NetSpec(d, (64,), init=models.InitSpec(gain=args.gain, zero_final=False))
        rand = cnf.CNFModel([models.init(spec, 0)], controller=ctrl)
        n0 = cnf.density_forward(zero, x, rng=0).nfe
        n1 = cnf.density_forward(rand, x, rng=0).nfe
        print(f"{d:<5d} {n0:<10d} {n1}")


if __name__ == "__main__":
    main()
