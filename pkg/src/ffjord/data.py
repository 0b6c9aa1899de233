"""Synthetic 2-D distributions with exact densities, and CSV tabular ingestion."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

LOG_2PI = float(np.log(2 * np.pi))

# Family constants. Chosen to sit inside the [-4, 4]^2 plotting box.
TWO_GAUSSIANS_MEANS = np.array([[2.0, 0.0], [-2.0, 0.0]])
TWO_GAUSSIANS_STD = 0.5
RING_RADIUS = 4.0 / np.sqrt(2.0)
RING_STD = 0.5 / np.sqrt(2.0)
RING_MEANS = RING_RADIUS * np.array(
    [[np.cos(k * np.pi / 4), np.sin(k * np.pi / 4)] for k in range(8)]
)
CHECKER_HALF_WIDTH = 4.0
CHECKER_CELL = 2.0
CHECKER_AREA = 32.0
CIRCLE_RADII = (1.0, 2.0)
CIRCLE_STD = 0.08
SPIRAL_TURNS = 1.5
SPIRAL_STD = 0.1

TOY_FAMILIES = ("two_gaussians", "eight_gaussians_ring", "checkerboard", "two_circles", "spiral")
SUPPORT_BOX = (-4.0, 4.0)


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Toy2DSpec:
    """A named 2-D family. ``noise`` overrides the family's default spread."""

    family: str
    noise: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.family not in TOY_FAMILIES:
            raise DataError(f"unknown toy family {self.family!r}; choose from {TOY_FAMILIES}")


def _std(spec: Toy2DSpec, default: float) -> float:
    return default if spec.noise is None else float(spec.noise)


def _mixture(rng, means, std, n):
    idx = rng.integers(0, len(means), size=n)
    return means[idx] + std * rng.standard_normal((n, 2))


def generate_toy(spec: Toy2DSpec, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """``n`` i.i.d. draws from the family; deterministic in ``spec.seed`` unless ``rng`` is given."""
    if n < 1:
        raise DataError("n must be at least 1")
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    fam = spec.family
    if fam == "two_gaussians":
        return _mixture(rng, TWO_GAUSSIANS_MEANS, _std(spec, TWO_GAUSSIANS_STD), n)
    if fam == "eight_gaussians_ring":
        return _mixture(rng, RING_MEANS, _std(spec, RING_STD), n)
    if fam == "checkerboard":
        # pick one of the 8 support cells uniformly, then a uniform point inside it
        cells = _checker_cells()
        idx = rng.integers(0, len(cells), size=n)
        return cells[idx] + CHECKER_CELL * rng.random((n, 2))
    if fam == "two_circles":
        which = rng.integers(0, 2, size=n)
        r = np.asarray(CIRCLE_RADII)[which] + _std(spec, CIRCLE_STD) * rng.standard_normal(n)
        theta = rng.uniform(0, 2 * np.pi, size=n)
        return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    if fam == "spiral":
        u = np.sqrt(rng.random(n))
        theta = u * SPIRAL_TURNS * 2 * np.pi
        r = 3.5 * u
        sign = np.where(rng.random(n) < 0.5, 1.0, -1.0)
        pts = np.stack([sign * r * np.cos(theta), sign * r * np.sin(theta)], axis=1)
        return pts + _std(spec, SPIRAL_STD) * rng.standard_normal((n, 2))
    raise DataError(f"unknown toy family {fam!r}")


def _checker_cells() -> np.ndarray:
    """Lower-left corners of the support squares: cell (i, j) is occupied when i + j is even."""
    corners = []
    ks = np.arange(-CHECKER_HALF_WIDTH, CHECKER_HALF_WIDTH, CHECKER_CELL)
    for x in ks:
        for y in ks:
            i = int(np.floor(x / CHECKER_CELL))
            j = int(np.floor(y / CHECKER_CELL))
            if (i + j) % 2 == 0:
                corners.append((x, y))
    return np.array(corners)


def checkerboard_support(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    inside_box = np.all(np.abs(x) <= CHECKER_HALF_WIDTH, axis=1)
    ij = np.floor(x / CHECKER_CELL).astype(np.int64)
    even = (ij.sum(axis=1) % 2) == 0
    return inside_box & even


def _mixture_logpdf(x, means, std):
    d2 = ((x[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    comp = -0.5 * d2 / std**2 - 2 * np.log(std) - LOG_2PI
    return logsumexp(comp, axis=1) - np.log(len(means))


def toy_true_logdensity(spec: Toy2DSpec, x) -> np.ndarray:
    """Exact log density of the generating distribution; ``-inf`` off a bounded support."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    fam = spec.family
    if fam == "two_gaussians":
        return _mixture_logpdf(x, TWO_GAUSSIANS_MEANS, _std(spec, TWO_GAUSSIANS_STD))
    if fam == "eight_gaussians_ring":
        return _mixture_logpdf(x, RING_MEANS, _std(spec, RING_STD))
    if fam == "checkerboard":
        out = np.full(len(x), -np.inf)
        out[checkerboard_support(x)] = -np.log(CHECKER_AREA)
        return out
    if fam == "two_circles":
        # uniform angle, Gaussian radius; the r < 0 tail is below 1e-30 for these radii
        std = _std(spec, CIRCLE_STD)
        r = np.sqrt((x**2).sum(axis=1))
        with np.errstate(divide="ignore"):
            comps = [
                -0.5 * ((r - R) / std) ** 2 - np.log(std) - 0.5 * LOG_2PI for R in CIRCLE_RADII
            ]
            return logsumexp(np.stack(comps, axis=1), axis=1) - np.log(2) - np.log(2 * np.pi * r)
    raise DataError(f"family {fam!r} has no closed-form density")


# --- tabular ------------------------------------------------------------------


@dataclass
class TabularDataset:
    """Train/val/test splits, standardised with train-split statistics."""

    name: str
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.train.shape[1]

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def unstandardize(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.std + self.mean

    def stats_dict(self) -> dict:
        return {
            "name": self.name,
            "dim": self.dim,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "sizes": {"train": len(self.train), "val": len(self.val), "test": len(self.test)},
            **self.meta,
        }

    def save_stats(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.stats_dict(), indent=2))

    @staticmethod
    def load_stats(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
        d = json.loads(Path(path).read_text())
        return np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64)

    @classmethod
    def from_array(cls, data: np.ndarray, name: str = "array", split=(0.8, 0.1, 0.1),
                   seed: int = 0, standardize: bool = True) -> "TabularDataset":
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 2 or len(data) == 0:
            raise DataError("data must be a non-empty 2-D array")
        tr, va, te = _split_indices(len(data), split, seed)
        train = data[tr]
        if standardize:
            mean = train.mean(axis=0)
            std = train.std(axis=0)
            bad = np.flatnonzero(std == 0)
            if bad.size:
                raise DataError(f"column {int(bad[0])} is constant in the training split")
        else:
            mean = np.zeros(data.shape[1])
            std = np.ones(data.shape[1])
        return cls(
            name=name,
            train=(train - mean) / std,
            val=(data[va] - mean) / std,
            test=(data[te] - mean) / std,
            mean=mean,
            std=std,
            meta={"split": list(split), "seed": seed},
        )


def _split_indices(n: int, split, seed: int):
    fr = np.asarray(split, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or not np.isclose(fr.sum(), 1.0):
        raise DataError("split ratios must be three non-negative numbers summing to 1")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fr[0] * n))
    n_val = int(round(fr[1] * n))
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def read_csv_matrix(path: str | Path) -> np.ndarray:
    """Rectangular numeric CSV, optionally with one header line."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: no rows")
    if not all(_is_number(c) for c in rows[0]):
        rows = rows[1:]
    if not rows:
        raise DataError(f"{path}: header only, no data rows")
    width = len(rows[0])
    out = np.empty((len(rows), width))
    for i, r in enumerate(rows):
        if len(r) != width:
            raise DataError(f"{path}: row {i} has {len(r)} fields, expected {width}")
        for j, c in enumerate(r):
            try:
                out[i, j] = float(c)
            except ValueError:
                raise DataError(f"{path}: non-numeric cell {c!r} at row {i}, column {j}") from None
    if not np.all(np.isfinite(out)):
        raise DataError(f"{path}: non-finite values")
    return out


def load_csv(path: str | Path, split=(0.8, 0.1, 0.1), seed: int = 0) -> TabularDataset:
    data = read_csv_matrix(path)
    return TabularDataset.from_array(data, name=Path(path).stem, split=split, seed=seed)


def toy_dataset(spec: Toy2DSpec, n_train: int, n_val: int = 2000, n_test: int = 5000) -> TabularDataset:
    """Independent draws per split, left unstandardised so densities stay in data coordinates."""
    rng = np.random.default_rng(spec.seed)
    train = generate_toy(spec, n_train, rng)
    val = generate_toy(spec, n_val, rng)
    test = generate_toy(spec, n_test, rng)
    return TabularDataset(
        name=spec.family, train=train, val=val, test=test,
        mean=np.zeros(2), std=np.ones(2), meta={"toy": spec.family, "seed": spec.seed},
    )


class Batcher:
    """Shuffled minibatches; each epoch is one permutation of the rows."""

    def __init__(self, data: np.ndarray, batch_size: int, seed: int = 0):
        if batch_size < 1:
            raise DataError("batch_size must be positive")
        if len(data) == 0:
            raise DataError("cannot batch an empty array")
        self.data = data
        self.batch_size = int(batch_size)
        self.seed = seed
        self.epoch = 0

    def __len__(self):
        return -(-len(self.data) // self.batch_size)

    def epoch_indices(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(len(self.data))

    def __iter__(self):
        perm = self.epoch_indices(self.epoch)
        self.epoch += 1
        for i in range(0, len(perm), self.batch_size):
            yield self.data[perm[i:i + self.batch_size]]
