"""Serializable run configuration with dotted-path overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import models
from .cnf import CNFModel, TraceEstimatorSpec
from .data import DataError, TabularDataset, Toy2DSpec, load_csv, toy_dataset
from .odesolve import StepController
from .training import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending dotted path."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class DatasetConfig:
    """``kind`` is ``toy`` (2-D family), ``csv`` (tabular file) or ``gaussian`` (standard normal)."""

    kind: str = "toy"
    family: str = "two_gaussians"
    path: str | None = None
    dim: int = 2
    n_train: int = 20000
    n_val: int = 1000
    n_test: int = 5000
    noise: float | None = None
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (64, 64, 64)
    activation: str = "tanh"
    num_flows: int = 1
    time_length: float = 1.0
    split_index: int | None = None
    init_scheme: str = "glorot_uniform"
    init_gain: float = 1.0
    zero_final: bool = True


@dataclass(frozen=True)
class SolverConfig:
    """Tolerances for training solves and for evaluation solves."""

    atol: float = 1e-5
    rtol: float = 1e-5
    eval_atol: float = 1e-8
    eval_rtol: float = 1e-6
    max_steps: int = 1_000_000


# fields of TrainConfig that are owned by other sections of a RunConfig
_TRAIN_OWNED_ELSEWHERE = {"atol": "solver", "rtol": "solver", "eval_atol": "solver",
                          "eval_rtol": "solver", "seed": "seed"}


@dataclass(frozen=True)
class RunConfig:
    command: str = "train"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    output_dir: str = "runs/default"
    seed: int = 0

    def to_dict(self) -> dict:
        d = {
            "command": self.command,
            "dataset": _plain(dataclasses.asdict(self.dataset)),
            "model": _plain(dataclasses.asdict(self.model)),
            "train": {k: v for k, v in self.train.to_dict().items() if k not in _TRAIN_OWNED_ELSEWHERE},
            "solver": dataclasses.asdict(self.solver),
            "output_dir": self.output_dir,
            "seed": self.seed,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        _reject_unknown("", d, {f.name for f in dataclasses.fields(cls)})
        seed = _typed("seed", d.get("seed", 0), int)
        solver = _build("solver", SolverConfig, d.get("solver", {}))
        train_d = dict(d.get("train", {}))
        if not isinstance(train_d, dict):
            raise ConfigError("train", "must be an object")
        for k, owner in _TRAIN_OWNED_ELSEWHERE.items():
            if k in train_d:
                raise ConfigError(f"train.{k}", f"set this under '{owner}' instead")
        train_d.update(atol=solver.atol, rtol=solver.rtol, eval_atol=solver.eval_atol,
                       eval_rtol=solver.eval_rtol, seed=seed)
        return cls(
            command=_typed("command", d.get("command", "train"), str),
            dataset=_build("dataset", DatasetConfig, d.get("dataset", {})),
            model=_build("model", ModelConfig, d.get("model", {})),
            train=_build("train", TrainConfig, train_d),
            solver=solver,
            output_dir=_typed("output_dir", d.get("output_dir", "runs/default"), str),
            seed=seed,
        )

    @classmethod
    def load(cls, path: str | Path, overrides: list[str] | None = None) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError("--config", f"file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("--config", f"invalid JSON: {exc}") from None
        apply_overrides(d, overrides or [])
        return cls.from_dict(d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @property
    def eval_controller(self) -> StepController:
        s = self.solver
        return StepController(atol=s.eval_atol, rtol=s.eval_rtol, max_steps=s.max_steps)


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _reject_unknown(prefix: str, d: dict, known: set[str]):
    for k in d:
        if k not in known:
            raise ConfigError(prefix + k, "unknown field")


def _typed(name: str, v: Any, typ: type):
    if typ is int and isinstance(v, bool) or not isinstance(v, typ):
        raise ConfigError(name, f"expected {typ.__name__}, got {type(v).__name__}")
    return v


def _build(section: str, cls, d: dict):
    if not isinstance(d, dict):
        raise ConfigError(section, "must be an object")
    _reject_unknown(section + ".", d, {f.name for f in dataclasses.fields(cls)})
    try:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(section, str(exc)) from None


def _parse_value(s: str):
    try:
        return json.loads(s)
    except json.JSONDecodeError:
        return s


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``--a.b=value`` or ``--a.b value`` pairs to a nested dict in place."""
    i = 0
    while i < len(overrides):
        tok = overrides[i]
        if not tok.startswith("--"):
            raise ConfigError(tok, "expected a --dotted.path override")
        key = tok[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
        else:
            if i + 1 >= len(overrides):
                raise ConfigError(key, "override is missing a value")
            i += 1
            raw = overrides[i]
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(key, f"'{p}' is not a section")
        node[parts[-1]] = _parse_value(raw)
        i += 1
    return d


# --- builders -----------------------------------------------------------------------


def build_model(cfg: ModelConfig, dim: int, seed: int = 0,
                trace: TraceEstimatorSpec | None = None,
                controller: StepController | None = None) -> CNFModel:
    init = models.InitSpec(scheme=cfg.init_scheme, gain=cfg.init_gain, zero_final=cfg.zero_final)
    spec = models.NetSpec(dim=dim, hidden=cfg.hidden, activation=cfg.activation,
                          split_index=cfg.split_index, init=init)
    nets = [models.init(spec, seed=seed + k) for k in range(cfg.num_flows)]
    return CNFModel(nets, trace=trace or TraceEstimatorSpec(),
                    controller=controller or StepController(),
                    times=[(0.0, cfg.time_length)] * cfg.num_flows)


def load_dataset(cfg: DatasetConfig) -> TabularDataset:
    if cfg.kind == "toy":
        try:
            spec = Toy2DSpec(cfg.family, noise=cfg.noise, seed=cfg.seed)
        except DataError as exc:
            raise ConfigError("dataset.family", str(exc)) from None
        return toy_dataset(spec, cfg.n_train, cfg.n_val, cfg.n_test)
    if cfg.kind == "csv":
        if not cfg.path:
            raise ConfigError("dataset.path", "required when dataset.kind is 'csv'")
        if not Path(cfg.path).is_file():
            raise ConfigError("dataset.path", f"file not found: {cfg.path}")
        return load_csv(cfg.path, split=cfg.split, seed=cfg.seed)
    if cfg.kind == "gaussian":
        rng = np.random.default_rng(cfg.seed)
        parts = [rng.standard_normal((n, cfg.dim)) for n in (cfg.n_train, cfg.n_val, cfg.n_test)]
        return TabularDataset("gaussian", *parts, mean=np.zeros(cfg.dim), std=np.ones(cfg.dim),
                              meta={"seed": cfg.seed})
    raise ConfigError("dataset.kind", f"unknown kind {cfg.kind!r}; choose toy, csv or gaussian")
