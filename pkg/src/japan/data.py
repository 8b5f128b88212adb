"""Synthetic generators, deterministic splits, standardization and CSV I/O."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from japan.numcore import Rng

TOY_NAMES = ("moons", "circles", "checkerboard", "spiral", "crescent")
DEFAULT_FRACTIONS = (0.6, 0.2, 0.2)


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ToySpec:
    name: str
    n: int = 10_000
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.name not in TOY_NAMES:
            raise DataError(f"unknown toy density {self.name!r}; choose from {', '.join(TOY_NAMES)}")
        if self.n < 10:
            raise DataError("toy datasets need n >= 10")
        if self.noise < 0:
            raise DataError("noise must be non-negative")


@dataclass
class Dataset:
    """Paired records; ``x`` is (n, c) with c possibly 0, ``y`` is (n, d).

    After :func:`split` the index arrays and train-split standardization
    statistics are populated; :meth:`part` returns standardized arrays.
    """

    x: np.ndarray
    y: np.ndarray
    name: str = "data"
    train_idx: np.ndarray | None = None
    cal_idx: np.ndarray | None = None
    test_idx: np.ndarray | None = None
    x_mean: np.ndarray | None = None
    x_std: np.ndarray | None = None
    y_mean: np.ndarray | None = None
    y_std: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).reshape(len(self.y), -1)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.y.ndim != 2:
            raise DataError("y must be a matrix")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def c(self) -> int:
        return self.x.shape[1]

    @property
    def d(self) -> int:
        return self.y.shape[1]

    @property
    def is_split(self) -> bool:
        return self.train_idx is not None

    def standardize_x(self, x: np.ndarray) -> np.ndarray:
        return (x - self.x_mean) / self.x_std

    def standardize_y(self, y: np.ndarray) -> np.ndarray:
        return (y - self.y_mean) / self.y_std

    def part(self, which: str) -> tuple[np.ndarray, np.ndarray]:
        if not self.is_split:
            raise DataError("dataset has not been split")
        idx = {"train": self.train_idx, "cal": self.cal_idx, "test": self.test_idx}[which]
        return self.standardize_x(self.x[idx]), self.standardize_y(self.y[idx])

    @property
    def area_scale(self) -> float:
        """Factor converting a standardized-unit area back to raw units."""
        return float(np.prod(self.y_std))


# ---------------------------------------------------------------------------
# generators


def _moons(rng: Rng, n: int):
    upper = rng.uniform(n) < 0.5
    t = math.pi * rng.uniform(n)
    y = np.where(upper[:, None],
                 np.c_[np.cos(t), np.sin(t)],
                 np.c_[1.0 - np.cos(t), 0.5 - np.sin(t)])
    return y


def _circles(rng: Rng, n: int):
    radius = np.where(rng.uniform(n) < 0.5, 1.0, 2.0)
    theta = 2.0 * math.pi * rng.uniform(n)
    return radius, theta


def _checkerboard(rng: Rng, n: int):
    # 4x4 board of unit cells on [-2, 2]^2; black cells have (col + row) even
    cell = np.minimum((8 * rng.uniform(n)).astype(np.int64), 7)
    row = cell // 2
    col = 2 * (cell % 2) + (row % 2)
    u = rng.uniform(2 * n).reshape(n, 2)
    return np.c_[col + u[:, 0], row + u[:, 1]] - 2.0


def _spiral(rng: Rng, n: int):
    t = 3.0 * math.pi * rng.uniform(n)
    arm = np.where(rng.uniform(n) < 0.5, 0.0, math.pi)
    r = 0.5 + 0.4 * t
    return np.c_[r * np.cos(t + arm), r * np.sin(t + arm)]


def _crescent(rng: Rng, n: int):
    t = math.pi * rng.uniform(n)
    return np.c_[np.cos(t), np.sin(t)]


def generate_toy(spec: ToySpec) -> Dataset:
    """Unsplit, unconditional 2D sample from one of the toy densities."""
    rng = Rng(spec.seed, stream=f"toy:{spec.name}")
    n, sigma = spec.n, spec.noise
    if spec.name == "circles":
        radius, theta = _circles(rng, n)
        r = radius + sigma * rng.normal(n)
        y = np.c_[r * np.cos(theta), r * np.sin(theta)]
    else:
        base = {"moons": _moons, "checkerboard": _checkerboard,
                "spiral": _spiral, "crescent": _crescent}[spec.name](rng, n)
        y = base + sigma * rng.normal(2 * n).reshape(n, 2)
    return Dataset(np.empty((n, 0)), y, name=spec.name,
                   meta={"toy": spec.name, "noise": sigma, "seed": spec.seed})


def conditional_noise_scale(x):
    return 0.05 + 0.15 * (np.asarray(x) + 1.0) / 2.0


def generate_conditional(n: int, seed: int = 0) -> Dataset:
    """Bimodal 2D target whose noise width grows with a scalar context.

    ``x ~ U[-1, 1]``; ``y = (sin(pi x) +/- 1, cos(pi x)) + N(0, s(x)^2 I)``.
    """
    if n < 10:
        raise DataError("conditional datasets need n >= 10")
    rng = Rng(seed, stream="conditional")
    x = 2.0 * rng.uniform(n) - 1.0
    sign = np.where(rng.uniform(n) < 0.5, -1.0, 1.0)
    s = conditional_noise_scale(x)
    eps = rng.normal(2 * n).reshape(n, 2)
    y = np.c_[np.sin(math.pi * x) + sign, np.cos(math.pi * x)] + s[:, None] * eps
    return Dataset(x[:, None], y, name="conditional", meta={"seed": seed})


# ---------------------------------------------------------------------------
# splitting


def split(dataset: Dataset, fractions=DEFAULT_FRACTIONS, seed: int = 0) -> Dataset:
    """Random permutation, then contiguous train/cal/test blocks.

    Standardization statistics come from the train block only.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or sum(fractions) > 1 + 1e-12:
        raise DataError(f"fractions must be three positive numbers summing to <= 1, got {fractions}")
    n = dataset.n
    sizes = [math.floor(n * f + 1e-9) for f in fractions]
    if min(sizes) == 0:
        raise DataError(f"split of n={n} with fractions {fractions} leaves an empty part")
    perm = Rng(seed, stream="split").permutation(n)
    a, b = sizes[0], sizes[0] + sizes[1]
    train, cal, test = perm[:a], perm[a:b], perm[b:b + sizes[2]]
    x_tr, y_tr = dataset.x[train], dataset.y[train]
    return replace(
        dataset,
        train_idx=train, cal_idx=cal, test_idx=test,
        x_mean=x_tr.mean(axis=0), x_std=_safe_std(x_tr),
        y_mean=y_tr.mean(axis=0), y_std=_safe_std(y_tr),
    )


def _safe_std(a: np.ndarray) -> np.ndarray:
    std = a.std(axis=0)
    return np.where(std > 0, std, 1.0)


# ---------------------------------------------------------------------------
# CSV


def load_csv(path, x_cols, y_cols, seed: int | None = 0, fractions=DEFAULT_FRACTIONS) -> Dataset:
    """Read a headered CSV; split and standardize unless ``seed`` is None."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        cols = {}
        for name in list(x_cols) + list(y_cols):
            if name not in header:
                raise DataError(f"{path}: column {name!r} not found in header")
            cols[name] = header.index(name)
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            values = []
            for name in list(x_cols) + list(y_cols):
                cell = row[cols[name]] if cols[name] < len(row) else ""
                try:
                    values.append(float(cell))
                except ValueError:
                    raise DataError(
                        f"{path}: row {line_no}, column {name!r}: non-numeric value {cell!r}"
                    ) from None
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")
    table = np.array(rows, dtype=np.float64)
    c = len(x_cols)
    ds = Dataset(table[:, :c], table[:, c:], name=path.stem,
                 meta={"x_cols": list(x_cols), "y_cols": list(y_cols)})
    return ds if seed is None else split(ds, fractions, seed)


def write_csv(dataset: Dataset, path) -> None:
    """Raw (unstandardized) columns x0.., y0..; floats written with repr."""
    header = [f"x{i}" for i in range(dataset.c)] + [f"y{i}" for i in range(dataset.d)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for xr, yr in zip(dataset.x, dataset.y):
            writer.writerow([repr(float(v)) for v in xr] + [repr(float(v)) for v in yr])


def column_names(dataset: Dataset) -> tuple[list[str], list[str]]:
    return [f"x{i}" for i in range(dataset.c)], [f"y{i}" for i in range(dataset.d)]
