"""Command-line entry point: ``ffjord <command> [options] [--section.field value ...]``.

Exit codes: 0 success, 1 runtime or solver failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .cnf import (
    CNFModel,
    TraceEstimatorSpec,
    adjoint_gradients,
    density_forward,
    density_grid,
    finite_difference_gradients,
    sample,
    sample_noise,
    trace_draws,
    unrolled_gradients,
)
from .config import ConfigError, RunConfig, build_model, load_dataset
from .data import DataError, read_csv_matrix
from .models import InitSpec, NetSpec, init
from .odesolve import SolverError, StepController
from .training import Checkpoint, EvaluationError, TrainingAborted, config_hash, evaluate, train

log = logging.getLogger("ffjord")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
CHECKPOINT_NAME = "checkpoint.ffj"
TRAINLOG_NAME = "trainlog.ndjson"
STATS_NAME = "stats.json"
CONFIG_NAME = "config.json"


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``max|a - b| / max|b|``; reference ``b`` all zero falls back to the absolute error."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    diff = float(np.max(np.abs(a - b))) if a.size else 0.0
    ref = float(np.max(np.abs(b))) if b.size else 0.0
    return diff / ref if ref > 0 else diff


# --- checkpoint helpers ------------------------------------------------------------


def load_model(path: str | Path) -> tuple[CNFModel, RunConfig, Checkpoint]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("--checkpoint", f"file not found: {path}")
    try:
        ckpt = Checkpoint.load(path)
    except (ValueError, json.JSONDecodeError) as exc:
        raise ConfigError("--checkpoint", str(exc)) from None
    cfg = RunConfig.from_dict(ckpt.meta["run_config"])
    model = build_model(cfg.model, int(ckpt.meta["dim"]), seed=cfg.seed,
                        trace=TraceEstimatorSpec(kind=cfg.train.trace, noise=cfg.train.noise),
                        controller=cfg.eval_controller)
    ckpt.restore(model)
    return model, cfg, ckpt


def _controller(cfg: RunConfig, tol: float | None) -> StepController:
    if tol is None:
        return cfg.eval_controller
    return StepController(atol=tol, rtol=tol, max_steps=cfg.solver.max_steps)


# --- commands ----------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config, args.overrides)
    cfg = replace(cfg, command="train")
    dataset = load_dataset(cfg.dataset)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / CONFIG_NAME)
    dataset.save_stats(out / STATS_NAME)
    model = build_model(cfg.model, dataset.dim, seed=cfg.seed)
    meta = {"run_config": cfg.to_dict(), "dim": dataset.dim, "stats": dataset.stats_dict(),
            "config_hash": config_hash(cfg.to_dict())}
    ckpt_path = out / CHECKPOINT_NAME
    resume = None
    if args.resume:
        try:
            resume = Checkpoint.load(args.resume)
        except (OSError, ValueError) as exc:
            raise ConfigError("--resume", str(exc)) from None
        if resume.meta.get("config_hash") != meta["config_hash"]:
            raise ConfigError("--resume", "checkpoint was written by a different configuration")
    # a resumed run appends to its log, a fresh one starts it
    with open(out / TRAINLOG_NAME, "a" if resume else "w") as sink:
        try:
            model, tlog = train(model, dataset, cfg.train, log_sink=sink,
                                checkpoint_path=ckpt_path, run_meta=meta, resume=resume)
        except TrainingAborted as exc:
            Checkpoint.from_model(model, {**meta, "aborted": str(exc)}).save(ckpt_path)
            print(f"training aborted: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
    metrics = {"iterations": len(tlog.iterations)}
    if len(dataset.test):
        res = evaluate(model, dataset.test, exact_trace=True, controller=cfg.eval_controller,
                       batch_size=cfg.train.eval_batch_size)
        metrics["test"] = res.to_dict()
        print(f"test nll {res.nll:.4f} ± {res.se:.4f} nats")
    Checkpoint.from_model(model, {**meta, "metrics": metrics,
                                  "iteration": len(tlog.iterations)}).save(ckpt_path)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    print(f"wrote {ckpt_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg, ckpt = load_model(args.checkpoint)
    if args.csv:
        raw = read_csv_matrix(args.csv)
        stats = ckpt.meta.get("stats", {})
        mean = np.asarray(stats.get("mean", np.zeros(raw.shape[1])))
        std = np.asarray(stats.get("std", np.ones(raw.shape[1])))
        if raw.shape[1] != model.dim:
            raise ConfigError("--csv", f"data has {raw.shape[1]} columns, checkpoint expects {model.dim}")
        x = (raw - mean) / std
    else:
        dataset = load_dataset(cfg.dataset)
        if dataset.dim != model.dim:
            raise ConfigError("dataset", f"dataset has {dataset.dim} dimensions, checkpoint expects {model.dim}")
        x = getattr(dataset, args.split)
    res = evaluate(model, x, exact_trace=args.exact_trace, controller=_controller(cfg, args.tol),
                   batch_size=args.batch_size, rng=args.seed)
    payload = {"split": "csv" if args.csv else args.split, "exact_trace": args.exact_trace, **res.to_dict()}
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("eval.json")
    out.write_text(json.dumps(payload, indent=2) + "\n")
    print(f"nll {res.nll:.6f} ± {res.se:.6f} nats ({res.bits_per_dim:.6f} bits/dim), n={res.n}")
    return EXIT_OK


def cmd_sample(args) -> int:
    if args.n < 0:
        raise ConfigError("--n", "must be non-negative")
    model, cfg, ckpt = load_model(args.checkpoint)
    z = sample(model, args.n, rng_seed=args.seed, controller=_controller(cfg, args.tol))
    stats = ckpt.meta.get("stats", {})
    if "mean" in stats:
        z = z * np.asarray(stats["std"]) + np.asarray(stats["mean"])
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("samples.csv")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(model.dim)])
        w.writerows(z.tolist())
    print(f"wrote {len(z)} samples to {out}")
    return EXIT_OK


def parse_box(text: str) -> tuple[float, float, float, float]:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError("--box", f"expected comma-separated numbers, got {text!r}") from None
    if len(vals) == 2:
        vals = vals * 2
    if len(vals) != 4 or not (vals[0] < vals[1] and vals[2] < vals[3]):
        raise ConfigError("--box", "expected 'lo,hi' or 'xlo,xhi,ylo,yhi' with lo < hi")
    return tuple(vals)


def cmd_density_grid(args) -> int:
    model, cfg, _ = load_model(args.checkpoint)
    if model.dim != 2:
        raise ConfigError("--checkpoint", f"density grids need a 2-D model, got dimension {model.dim}")
    if args.resolution < 1:
        raise ConfigError("--resolution", "must be positive")
    box = parse_box(args.box)
    grid = density_grid(model, box, args.resolution, controller=_controller(cfg, args.tol),
                        batch_size=args.batch_size)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("density_grid.csv")
    gx, gy = np.meshgrid(grid.xs, grid.ys)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "log_density"])
        for x, y, lp in zip(gx.ravel(), gy.ravel(), grid.logp.ravel()):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(lp))])
        fh.write(f"# mass={grid.mass!r} box={','.join(map(str, box))} resolution={args.resolution} nfe={grid.nfe}\n")
    print(f"mass {grid.mass:.8f} over box {box}; wrote {out}")
    return EXIT_OK


def gradcheck(dim: int = 2, hidden: tuple[int, ...] = (8,), batch: int = 4, seed: int = 0,
              tol: float = 1e-8, fd_tol: float = 1e-11, fd_step: float = 1e-5,
              unrolled_steps: int = 1000, noise: str = "gaussian", zero_weights: bool = False,
              trace_sign: float = 1.0) -> dict:
    """Compare adjoint gradients with central differences and unrolled RK4 on one small model."""
    spec = NetSpec(dim=dim, hidden=hidden, init=InitSpec(zero_final=False))
    net = init(spec, seed=seed)
    if zero_weights:
        net.params.assign(np.zeros(net.params.count))
    model = CNFModel([net])
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, dim))
    eps = sample_noise(rng, (batch, dim), noise)
    trace = TraceEstimatorSpec(kind="hutchinson", noise=noise, epsilon=eps)
    ctrl = StepController.with_tol(tol)
    adj = adjoint_gradients(model, x, trace=trace, controller=ctrl, trace_sign=trace_sign).flat()
    unr = unrolled_gradients(model, x, unrolled_steps, trace=trace).flat()
    fd = finite_difference_gradients(model, x, trace, StepController.with_tol(fd_tol), step=fd_step)
    return {
        "n_params": int(adj.size),
        "adjoint_vs_fd": relative_error(adj, fd),
        "adjoint_vs_unrolled": relative_error(adj, unr),
        "max_abs_grad": float(np.max(np.abs(adj))),
    }


def cmd_gradcheck(args) -> int:
    if args.dim > 4:
        raise ConfigError("--dim", "gradient checks are limited to D <= 4")
    hidden = tuple(int(h) for h in args.hidden.split(",")) if args.hidden else ()
    rep = gradcheck(dim=args.dim, hidden=hidden, batch=args.batch, seed=args.seed, tol=args.tol,
                    unrolled_steps=args.unrolled_steps, zero_weights=args.zero_weights,
                    trace_sign=-1.0 if args.corrupt_sign else 1.0)
    worst = max(rep["adjoint_vs_fd"], rep["adjoint_vs_unrolled"])
    ok = worst <= args.threshold
    rep["status"] = "PASS" if ok else "FAIL"
    print(f"adjoint vs finite differences: {rep['adjoint_vs_fd']:.3e}")
    print(f"adjoint vs unrolled RK4:       {rep['adjoint_vs_unrolled']:.3e}")
    print(rep["status"])
    if args.out:
        Path(args.out).write_text(json.dumps(rep, indent=2) + "\n")
    return EXIT_OK if ok else EXIT_RUNTIME


def trace_bench(dim: int = 10, hidden: tuple[int, ...] = (32, 2, 32), draws: int = 100_000,
                seed: int = 0, activation: str = "tanh") -> dict:
    """Mean and variance of each trace estimator at one random point of a random MLP."""
    bottleneck = hidden.index(min(hidden)) if hidden else None
    spec = NetSpec(dim=dim, hidden=hidden, activation=activation, split_index=bottleneck,
                   init=InitSpec(zero_final=False))
    net = init(spec, seed=seed)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(dim)
    t = 0.5
    exact = float(trace_draws(net, z, t, "exact", "gaussian", 1, rng)[0])
    rows = {"exact": exact}
    kinds = ["hutchinson"] + (["bottleneck"] if bottleneck is not None else [])
    for kind in kinds:
        for noise in ("gaussian", "rademacher"):
            d = trace_draws(net, z, t, kind, noise, draws, rng)
            rows[f"{kind}/{noise}"] = {
                "mean": float(d.mean()),
                "var": float(d.var(ddof=1)),
                "se": float(d.std(ddof=1) / np.sqrt(draws)),
            }
    return {"dim": dim, "hidden": list(hidden), "draws": draws, "estimators": rows}


def cmd_trace_bench(args) -> int:
    hidden = tuple(int(h) for h in args.hidden.split(",")) if args.hidden else ()
    rep = trace_bench(dim=args.dim, hidden=hidden, draws=args.draws, seed=args.seed)
    print(f"exact trace {rep['estimators']['exact']:.6f}")
    for k, v in rep["estimators"].items():
        if k != "exact":
            print(f"{k:22s} mean {v['mean']:.6f}  se {v['se']:.2e}  var {v['var']:.6f}")
    if args.out:
        Path(args.out).write_text(json.dumps(rep, indent=2) + "\n")
    return EXIT_OK


# --- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ffjord", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train a model from a JSON run config")
    s.add_argument("--config", required=True)
    s.add_argument("--resume", help="continue from a *.last.ffj checkpoint of the same config")
    s.set_defaults(func=cmd_train, allow_overrides=True)

    s = sub.add_parser("eval", help="mean NLL of a checkpoint on a dataset split or CSV")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", choices=("train", "val", "test"), default="test")
    s.add_argument("--csv")
    s.add_argument("--exact-trace", action=argparse.BooleanOptionalAction, default=True)
    s.add_argument("--tol", type=float)
    s.add_argument("--batch-size", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", help="draw samples from a checkpoint as CSV")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("density-grid", help="log density on a regular 2-D grid, with its Riemann mass")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--box", default="-4,4,-4,4")
    s.add_argument("--resolution", type=int, default=200)
    s.add_argument("--tol", type=float)
    s.add_argument("--batch-size", type=int, default=10000)
    s.add_argument("--out")
    s.set_defaults(func=cmd_density_grid)

    s = sub.add_parser("gradcheck", help="adjoint gradients against finite differences and unrolled RK4")
    s.add_argument("--dim", type=int, default=2)
    s.add_argument("--hidden", default="8")
    s.add_argument("--batch", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-8)
    s.add_argument("--unrolled-steps", type=int, default=1000)
    s.add_argument("--threshold", type=float, default=1e-3)
    s.add_argument("--zero-weights", action="store_true")
    s.add_argument("--corrupt-sign", action="store_true", help=argparse.SUPPRESS)
    s.add_argument("--out")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("trace-bench", help="variance of the trace estimators on a random MLP")
    s.add_argument("--dim", type=int, default=10)
    s.add_argument("--hidden", default="32,2,32")
    s.add_argument("--draws", type=int, default=100_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_trace_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    if rest and not getattr(args, "allow_overrides", False):
        parser.error(f"unrecognized arguments: {' '.join(rest)}")
    args.overrides = rest
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, EvaluationError, TrainingAborted, ad.AutodiffError,
            FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
