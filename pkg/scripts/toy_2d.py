"""Train a CNF on a 2-D toy family and report held-out NLL against the closed-form oracle.

    python scripts/toy_2d.py --family two_gaussians --iters 1000
"""

import argparse
import time

import numpy as np

from ffjord import cnf, data, models, training


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--family", default="two_gaussians", choices=data.TOY_FAMILIES)
    p.add_argument("--hidden", default="64,64,64")
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    spec = data.Toy2DSpec(args.family, seed=args.seed)
    ds = data.toy_dataset(spec, 20_000, 1000, 5000)
    hidden = tuple(int(h) for h in args.hidden.split(","))
    model = cnf.CNFModel([models.init(models.NetSpec(2, hidden), seed=args.seed)])
    cfg = training.TrainConfig(lr=args.lr, batch_size=args.batch_size, max_iters=args.iters,
                               eval_every=max(1, args.iters // 4), patience=100, seed=args.seed)
    start = time.time()

    def progress(it, log):
        if it % 100 == 0:
            r = log.iterations[-1]
            print(f"iter {it:5d}  loss {r['loss']:.4f}  nfe {r['nfe_forward']}/{r['nfe_backward']}", flush=True)

    model, log = training.train(model, ds, cfg, callback=progress)
    res = training.evaluate(model, ds.test)
    print(f"test nll {res.nll:.4f} +- {res.se:.4f}  ({time.time() - start:.0f}s)")
    if args.family == "checkerboard":
        s = cnf.sample(model, 10_000, args.seed)
        print(f"samples inside support: {data.checkerboard_support(s).mean():.4f}")
    elif args.family != "spiral":
        oracle = -float(np.mean(data.toy_true_logdensity(spec, ds.test)))
        print(f"oracle nll {oracle:.4f}  gap {res.nll - oracle:+.4f}")


if __name__ == "__main__":
    main()
