"""Mean and variance of exact, Hutchinson and bottleneck trace estimators on a random MLP."""

import argparse
import json

from ffjord.cli import trace_bench


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--dim", type=int, default=10)
    p.add_argument("--hidden", default="32,2,32")
    p.add_argument("--draws", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    rep = trace_bench(args.dim, tuple(int(h) for h in args.hidden.split(",")), args.draws, args.seed)
    print(f"exact trace {rep['estimators']['exact']:.6f}")
    for name, row in rep["estimators"].items():
        if name != "exact":
            print(f"{name:24s} mean {row['mean']:+.6f}  se {row['se']:.2e}  var {row['var']:.4e}")
    print(json.dumps(rep))


if __name__ == "__main__":
    main()
