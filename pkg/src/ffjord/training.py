"""Maximum-likelihood training with Adam, NFE logging and binary checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import IO

import numpy as np

from . import autodiff as ad
from .cnf import (
    CNFModel,
    TraceEstimatorSpec,
    adjoint_gradients,
    density_forward,
    unrolled_gradients,
)
from .data import Batcher, DataError, TabularDataset
from .odesolve import MaxStepsExceededError, NonFiniteDynamicsError, SolverError, StepController, StepSizeUnderflowError

log = logging.getLogger(__name__)

LN2 = math.log(2.0)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    lr_decay: float = 1.0
    lr_decay_epoch: int | None = None
    weight_decay: float = 0.0
    epochs: int = 100
    max_iters: int | None = None
    batch_size: int = 256
    atol: float = 1e-5
    rtol: float = 1e-5
    eval_atol: float = 1e-8
    eval_rtol: float = 1e-6
    trace: str = "hutchinson"
    noise: str = "rademacher"
    gradient: str = "adjoint"
    unrolled_steps: int = 100
    seed: int = 0
    patience: int = 20
    eval_every: int | None = None
    eval_batch_size: int = 1000
    val_limit: int | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if not (self.atol > 0 and self.rtol > 0 and self.eval_atol > 0 and self.eval_rtol > 0):
            raise ValueError("tolerances must be positive")
        if self.gradient not in ("adjoint", "unrolled"):
            raise ValueError("gradient must be 'adjoint' or 'unrolled'")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        object.__setattr__(self, "betas", tuple(self.betas))
        TraceEstimatorSpec(kind=self.trace, noise=self.noise)

    @property
    def controller(self) -> StepController:
        return StepController(atol=self.atol, rtol=self.rtol)

    @property
    def eval_controller(self) -> StepController:
        return StepController(atol=self.eval_atol, rtol=self.eval_rtol)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown train config fields: {sorted(extra)}")
        return cls(**d)


# --- optimiser ------------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: list[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
              hyper: AdamHyper) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new arrays and a new state."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    t = state.step + 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + hyper.eps)
        new_p.append(p - hyper.lr * update)
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


# --- logs and checkpoints -----------------------------------------------------------


@dataclass
class TrainLog:
    """Append-only per-iteration and per-validation records."""

    iterations: list[dict] = field(default_factory=list)
    validations: list[dict] = field(default_factory=list)
    sink: IO[str] | None = field(default=None, repr=False)

    def _emit(self, rec: dict):
        if self.sink is not None:
            self.sink.write(json.dumps(rec) + "\n")
            self.sink.flush()

    def add_iteration(self, **rec):
        rec = {"kind": "iter", **rec}
        self.iterations.append(rec)
        self._emit(rec)

    def add_validation(self, **rec):
        rec = {"kind": "val", **rec}
        self.validations.append(rec)
        self._emit(rec)

    @property
    def losses(self) -> list[float]:
        return [r["loss"] for r in self.iterations]

    @property
    def nfe_forward(self) -> list[int]:
        return [r["nfe_forward"] for r in self.iterations]

    @property
    def nfe_backward(self) -> list[int]:
        return [r["nfe_backward"] for r in self.iterations]

    def to_ndjson(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in [*self.iterations, *self.validations])

    @classmethod
    def read_ndjson(cls, path: str | Path) -> "TrainLog":
        out = cls()
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            (out.iterations if rec.get("kind") == "iter" else out.validations).append(rec)
        return out


CHECKPOINT_MAGIC = b"FFJCKPT1"


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    """JSON header plus named float64 arrays.

    File layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON
    header, then for each array in ``header["arrays"]`` order a little-endian
    uint64 element count followed by that many little-endian float64 values.
    """

    meta: dict
    arrays: dict[str, np.ndarray]

    def save(self, path: str | Path) -> None:
        header = dict(self.meta)
        header["arrays"] = [{"name": k, "shape": list(v.shape)} for k, v in self.arrays.items()]
        hb = json.dumps(header, sort_keys=True).encode("utf-8")
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<Q", len(hb)))
            fh.write(hb)
            for v in self.arrays.values():
                flat = np.ascontiguousarray(v, dtype="<f8").ravel()
                fh.write(struct.pack("<Q", flat.size))
                fh.write(flat.tobytes())
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if raw[:8] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack_from("<Q", raw, 8)
        off = 16
        header = json.loads(raw[off:off + hlen].decode("utf-8"))
        off += hlen
        arrays = {}
        for entry in header.pop("arrays"):
            (n,) = struct.unpack_from("<Q", raw, off)
            off += 8
            shape = tuple(entry["shape"])
            if int(np.prod(shape)) != n:
                raise ValueError(f"{path}: array {entry['name']} has inconsistent size")
            arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
            off += 8 * n
        if off != len(raw):
            raise ValueError(f"{path}: trailing bytes")
        return cls(header, arrays)

    @classmethod
    def from_model(cls, model: CNFModel, meta: dict, adam: AdamState | None = None) -> "Checkpoint":
        arrays = {k: t.data.copy() for k, t in model.params.items()}
        meta = dict(meta)
        if adam is not None:
            names = model.params.names()
            for k, m, v in zip(names, adam.m, adam.v):
                arrays[f"adam.m.{k}"] = m.copy()
                arrays[f"adam.v.{k}"] = v.copy()
            meta["adam_step"] = adam.step
        return cls(meta, arrays)

    def restore(self, model: CNFModel) -> AdamState | None:
        names = model.params.names()
        missing = [k for k in names if k not in self.arrays]
        if missing:
            raise ValueError(f"checkpoint lacks parameters {missing}")
        model.params.assign_dict({k: self.arrays[k] for k in names})
        if "adam_step" in self.meta and all(f"adam.m.{k}" in self.arrays for k in names):
            return AdamState(
                [self.arrays[f"adam.m.{k}"].copy() for k in names],
                [self.arrays[f"adam.v.{k}"].copy() for k in names],
                int(self.meta["adam_step"]),
            )
        return None


# --- evaluation -------------------------------------------------------------------


@dataclass
class EvalResult:
    nll: float
    std: float
    se: float
    n: int
    dim: int
    nfe: int

    @property
    def bits_per_dim(self) -> float:
        return self.nll / (self.dim * LN2)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bits_per_dim"] = self.bits_per_dim
        return d


class EvaluationError(RuntimeError):
    pass


def per_example_logp(model: CNFModel, x: np.ndarray, *, exact_trace: bool = True,
                     controller: StepController | None = None, batch_size: int = 1000,
                     rng=None) -> tuple[np.ndarray, int]:
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise EvaluationError("cannot evaluate on an empty dataset")
    rng = np.random.default_rng(rng)
    trace = TraceEstimatorSpec(kind="exact") if exact_trace else model.trace
    out = np.empty(len(x))
    nfe = 0
    for bi, i in enumerate(range(0, len(x), batch_size)):
        try:
            res = density_forward(model, x[i:i + batch_size], rng=rng, trace=trace, controller=controller)
        except SolverError as exc:
            raise EvaluationError(f"solver failed on batch {bi}: {exc}") from exc
        out[i:i + batch_size] = res.logp
        nfe += res.nfe
    return out, nfe


def evaluate(model: CNFModel, x: np.ndarray, *, exact_trace: bool = True,
             controller: StepController | None = None, batch_size: int = 1000, rng=None) -> EvalResult:
    """Mean negative log-likelihood in nats, with its spread and standard error."""
    logp, nfe = per_example_logp(model, x, exact_trace=exact_trace, controller=controller,
                                 batch_size=batch_size, rng=rng)
    nll = -logp
    n = len(nll)
    std = float(nll.std(ddof=1)) if n > 1 else 0.0
    return EvalResult(nll=float(nll.mean()), std=std, se=std / math.sqrt(n), n=n,
                      dim=model.dim, nfe=nfe)


# --- training ---------------------------------------------------------------------


def last_checkpoint_path(path: str | Path) -> Path:
    """Companion file holding optimizer state for resuming; ``run.ffj`` -> ``run.last.ffj``."""
    path = Path(path)
    return path.with_name(path.stem + ".last" + path.suffix)


class TrainingAborted(RuntimeError):
    """Training stopped early; the model holds the last good parameters."""

    def __init__(self, message: str, log: TrainLog):
        super().__init__(message)
        self.log = log


def _lr_at(cfg: TrainConfig, epoch: int) -> float:
    if cfg.lr_decay_epoch is not None and epoch >= cfg.lr_decay_epoch:
        return cfg.lr * cfg.lr_decay
    return cfg.lr


def loss_and_grads(model: CNFModel, x: np.ndarray, cfg: TrainConfig, rng: np.random.Generator):
    """Return (nll, grads, nfe_forward, nfe_backward) for one minibatch."""
    if cfg.gradient == "adjoint":
        fwd = density_forward(model, x, rng=rng, controller=cfg.controller)
        res = adjoint_gradients(model, forward=fwd, controller=cfg.controller)
    else:
        res = unrolled_gradients(model, x, cfg.unrolled_steps, rng=rng)
    return res.loss, res.grads, res.nfe_forward, res.nfe_backward


def train(model: CNFModel, dataset: TabularDataset, config: TrainConfig, *,
          log_sink: IO[str] | None = None, checkpoint_path: str | Path | None = None,
          resume: Checkpoint | None = None, run_meta: dict | None = None,
          callback=None) -> tuple[CNFModel, TrainLog]:
    """Fit ``model`` to ``dataset.train`` by minimising the mean negative log-density.

    Validation uses the exact trace at the evaluation tolerances. On return
    the model holds the best-validation parameters (or the final ones when
    no validation ran).
    """
    cfg = config
    if dataset.dim != model.dim:
        raise DataError(f"dataset has {dataset.dim} dimensions, model expects {model.dim}")
    model.trace = TraceEstimatorSpec(kind=cfg.trace, noise=cfg.noise)
    model.controller = cfg.controller
    batcher = Batcher(dataset.train, cfg.batch_size, seed=cfg.seed)
    n_batches = len(batcher)
    total = cfg.epochs * n_batches if cfg.max_iters is None else cfg.max_iters
    eval_every = cfg.eval_every or n_batches
    val = dataset.val if cfg.val_limit is None else dataset.val[: cfg.val_limit]

    params = model.params
    names = params.names()
    adam = AdamState.zeros_like([params[k].data for k in names])
    hyper_base = AdamHyper(lr=cfg.lr, beta1=cfg.betas[0], beta2=cfg.betas[1], eps=cfg.adam_eps)
    start = 0
    best = math.inf
    best_params = {k: params[k].data.copy() for k in names}
    bad_rounds = 0
    if resume is not None:
        restored = resume.restore(model)
        if restored is not None:
            adam = restored
        start = int(resume.meta.get("iteration", 0))
        best = float(resume.meta.get("best_val", math.inf))
        best_params = {k: resume.arrays.get(f"best.{k}", params[k].data).copy() for k in names}
        bad_rounds = int(resume.meta.get("bad_rounds", 0))

    tlog = TrainLog(sink=log_sink)
    meta = dict(run_meta or {})
    meta.setdefault("config_hash", config_hash(cfg.to_dict()))
    rng_base = cfg.seed
    perm_cache: dict[int, np.ndarray] = {}
    t_start = time.perf_counter()

    def save_best(it, extra):
        if checkpoint_path is None:
            return
        m = {**meta, "iteration": it, "epoch": it // n_batches, "best_val": best, **extra}
        Checkpoint.from_model(model, m).save(checkpoint_path)

    def save_last(it):
        # everything needed to continue bit-for-bit from iteration ``it``
        if checkpoint_path is None:
            return
        m = {**meta, "iteration": it, "epoch": it // n_batches, "best_val": best,
             "bad_rounds": bad_rounds}
        ck = Checkpoint.from_model(model, m, adam)
        ck.arrays.update({f"best.{k}": v for k, v in best_params.items()})
        ck.save(last_checkpoint_path(checkpoint_path))

    for it in range(start, total):
        epoch, pos = divmod(it, n_batches)
        if epoch not in perm_cache:
            perm_cache.clear()
            perm_cache[epoch] = batcher.epoch_indices(epoch)
        idx = perm_cache[epoch][pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
        x = dataset.train[idx]
        rng = np.random.default_rng([rng_base, it])
        try:
            nll, grads, nfe_f, nfe_b = loss_and_grads(model, x, cfg, rng)
        except (NonFiniteDynamicsError, ad.NonFiniteError, FloatingPointError) as exc:
            params.assign_dict(best_params)
            raise TrainingAborted(f"training diverged at iteration {it}: {exc}", tlog) from exc
        except (StepSizeUnderflowError, MaxStepsExceededError) as exc:
            params.assign_dict(best_params)
            raise TrainingAborted(
                f"ODE became too stiff at iteration {it} ({exc}); "
                "try a small weight decay to keep the dynamics non-stiff", tlog
            ) from exc
        if not math.isfinite(nll):
            params.assign_dict(best_params)
            raise TrainingAborted(f"loss is not finite at iteration {it}", tlog)

        theta = [params[k].data for k in names]
        loss = nll
        if cfg.weight_decay:
            loss += 0.5 * cfg.weight_decay * sum(float(np.sum(p * p)) for p in theta)
            grads = [g + cfg.weight_decay * p for g, p in zip(grads, theta)]
        lr = _lr_at(cfg, epoch)
        hyper = AdamHyper(lr=lr, beta1=hyper_base.beta1, beta2=hyper_base.beta2, eps=hyper_base.eps)
        new, adam = adam_step(theta, grads, adam, hyper)
        params.assign_dict(dict(zip(names, new)))
        tlog.add_iteration(iter=it, epoch=epoch, loss=loss, nll=nll, nfe_forward=nfe_f,
                           nfe_backward=nfe_b, lr=lr, wall_time=time.perf_counter() - t_start)
        if callback is not None:
            callback(it, tlog)

        if (it + 1) % eval_every == 0 or it + 1 == total:
            if len(val):
                res = evaluate(model, val, exact_trace=True, controller=cfg.eval_controller,
                               batch_size=cfg.eval_batch_size)
                improved = res.nll < best
                if improved:
                    best = res.nll
                    best_params = {k: params[k].data.copy() for k in names}
                    bad_rounds = 0
                else:
                    bad_rounds += 1
                tlog.add_validation(iter=it, epoch=epoch, val_nll=res.nll, val_se=res.se,
                                    nfe=res.nfe, best=best)
                log.info("iter %d val nll %.4f (best %.4f)", it, res.nll, best)
                if improved:
                    save_best(it + 1, {"val_nll": res.nll})
                save_last(it + 1)
                if bad_rounds >= cfg.patience:
                    log.info("early stopping at iteration %d", it)
                    break
            else:
                best_params = {k: params[k].data.copy() for k in names}
                save_best(it + 1, {})
                save_last(it + 1)

    params.assign_dict(best_params)
    return model, tlog
