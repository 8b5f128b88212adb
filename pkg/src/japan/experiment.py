"""Config-driven experiments: split, fit, calibrate, evaluate, report."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from japan import area as ar
from japan import baselines as bl
from japan import conformal as cp
from japan import data as dt
from japan import flow as nf
from japan.numcore import Rng, TrainingDivergenceError

RESULT_COLUMNS = ("dataset", "method", "variant", "seed", "epsilon", "coverage",
                  "area", "area_se", "train_nll", "seconds")
BASELINES = ("rect", "ellipse")
POSTERIOR_CONTEXTS = 50


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "toy"  # toy | conditional | csv
    name: str = "moons"
    n: int = 10_000
    noise: float = 0.05
    seed: int = 0
    path: str | None = None
    x_cols: tuple[str, ...] = ()
    y_cols: tuple[str, ...] = ()


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    methods: tuple[str, ...] = ("original", "rect", "ellipse")
    epsilons: tuple[float, ...] = (0.1,)
    seeds: tuple[int, ...] = (0,)
    train: nf.TrainConfig = field(default_factory=nf.TrainConfig)
    mc_samples: int = 3000
    mc_samples_global: int = 100_000
    area_contexts: int | None = None
    grid_resolution: int = 200
    ridge: float = 1e-3
    fractions: tuple[float, float, float] = dt.DEFAULT_FRACTIONS
    destandardize: bool = False
    timing: bool = False
    output_dir: str = "results"

    def __post_init__(self):
        if not self.methods or not self.epsilons or not self.seeds:
            raise ConfigError("methods, epsilons and seeds must be non-empty")
        for eps in self.epsilons:
            if not 0.0 < eps < 1.0:
                raise ConfigError(f"epsilon {eps} outside (0, 1)")
        for method in self.methods:
            if method not in BASELINES:
                try:
                    cp.Variant.parse(method)
                except (cp.ConfigurationError, ValueError) as exc:
                    raise ConfigError(f"bad method {method!r}: {exc}") from None
        if self.mc_samples < 1 or self.mc_samples_global < 1:
            raise ConfigError("Monte Carlo sample counts must be >= 1")


def _build(cls, doc, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in doc.items():
        kwargs[key] = tuple(value) if isinstance(value, list) else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(doc: dict) -> ExperimentConfig:
    doc = dict(doc)
    if "dataset" in doc:
        doc["dataset"] = _build(DatasetConfig, doc["dataset"], "dataset")
    if "train" in doc:
        doc["train"] = _build(nf.TrainConfig, doc["train"], "train")
    cfg = _build(ExperimentConfig, doc, "config")
    if cfg.dataset.kind not in ("toy", "conditional", "csv"):
        raise ConfigError(f"dataset.kind must be toy, conditional or csv, got {cfg.dataset.kind!r}")
    if cfg.dataset.kind == "csv" and not (cfg.dataset.path and cfg.dataset.y_cols):
        raise ConfigError("csv datasets need path and y_cols")
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return config_from_dict(doc)


def load_dataset(cfg: DatasetConfig, cache_dir: str | None = None) -> dt.Dataset:
    """Unsplit dataset; generated data is cached as CSV when ``cache_dir`` is set."""
    if cfg.kind == "csv":
        return dt.load_csv(cfg.path, cfg.x_cols, cfg.y_cols, seed=None)
    if not cache_dir:
        return _generate(cfg)
    stem = (f"{cfg.name}_{cfg.n}_{cfg.noise!r}_{cfg.seed}" if cfg.kind == "toy"
            else f"conditional_{cfg.n}_{cfg.seed}")
    path = Path(cache_dir) / f"{stem}.csv"
    if not path.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
        dt.write_csv(_generate(cfg), path)
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    ds = dt.load_csv(path, [h for h in header if h.startswith("x")],
                     [h for h in header if h.startswith("y")], seed=None)
    ds.name = cfg.name if cfg.kind == "toy" else "conditional"
    return ds


def _generate(cfg: DatasetConfig) -> dt.Dataset:
    if cfg.kind == "conditional":
        return dt.generate_conditional(cfg.n, cfg.seed)
    return dt.generate_toy(dt.ToySpec(cfg.name, cfg.n, cfg.noise, cfg.seed))


@dataclass
class ExperimentResult:
    dataset: str
    method: str
    variant: str
    seed: int
    epsilon: float
    coverage: float
    area: float
    area_se: float
    train_nll: float
    seconds: float
    error: str | None = None

    def row(self) -> list[str]:
        return [self.dataset, self.method, self.variant, str(self.seed), repr(self.epsilon),
                repr(self.coverage), repr(self.area), repr(self.area_se),
                repr(self.train_nll), repr(self.seconds)]


# ---------------------------------------------------------------------------
# one seed


def _flow_key(variant: cp.Variant) -> str:
    # variants sharing a flow reuse one trained model per seed
    if variant.kind in (cp.ORIGINAL, cp.LATENT, cp.TAU_GLOBAL, cp.TAU_KNN):
        return "joint"
    return variant.kind


def run_seed(cfg: ExperimentConfig, dataset: dt.Dataset, seed: int) -> list[ExperimentResult]:
    """All methods and epsilons for one split seed."""
    ds = dt.split(dataset, cfg.fractions, seed)
    x_tr, y_tr = ds.part("train")
    x_cal, y_cal = ds.part("cal")
    x_te, y_te = ds.part("test")
    scale = ds.area_scale if cfg.destandardize else 1.0
    train_cfg = nf.TrainConfig(**{**asdict(cfg.train), "seed": seed})
    fitted: dict[str, tuple] = {}
    results = []
    for method in cfg.methods:
        start = time.perf_counter()
        if method in BASELINES:
            base = cp.fit_base_predictor(x_tr, y_tr, cfg.ridge)
            for eps in cfg.epsilons:
                if method == "rect":
                    region = bl.fit_rect(base, x_cal, y_cal, eps)
                else:
                    region = bl.fit_ellipse(base, x_tr, y_tr, x_cal, y_cal, eps)
                cov = ar.coverage(region, x_te, y_te)
                results.append(ExperimentResult(ds.name, method, "baseline", seed, eps, cov,
                                                region.area * scale, 0.0, math.nan,
                                                time.perf_counter() - start))
            continue
        variant = cp.Variant.parse(method)
        key = _flow_key(variant)
        try:
            if key not in fitted:
                fitted[key] = cp.fit_models(variant, x_tr, y_tr, train_cfg, cfg.ridge,
                                            Rng(seed, stream=f"train:{key}"))
            model, base = fitted[key]
            region0 = cp.calibrate_region(variant, model, x_cal, y_cal, cfg.epsilons[0], base)
        except TrainingDivergenceError as exc:
            for eps in cfg.epsilons:
                results.append(ExperimentResult(ds.name, method, variant.kind, seed, eps,
                                                math.nan, math.nan, math.nan, math.nan,
                                                time.perf_counter() - start, error=str(exc)))
            continue
        nll = model.history[-1] if model.history else math.nan
        for eps in cfg.epsilons:
            region = region0.with_epsilon(eps)
            cov = ar.coverage(region, x_te, y_te)
            est = _region_area(cfg, region, x_te, y_te, Rng(seed, stream=f"mc:{method}"))
            results.append(ExperimentResult(ds.name, method, variant.kind, seed, eps, cov,
                                            est.value * scale, est.se * scale, nll,
                                            time.perf_counter() - start))
    return results


def _region_area(cfg: ExperimentConfig, region: cp.PredictionRegion, x_te, y_te, rng: Rng):
    contexts = x_te if cfg.area_contexts is None else x_te[:cfg.area_contexts]
    if region.variant.kind == cp.POSTERIOR:
        # one grid pass per context is expensive; cap the number of contexts
        contexts = contexts[:POSTERIOR_CONTEXTS]
        grid = ar.Grid2D.covering(y_te, resolution=cfg.grid_resolution)
        vals = [ar.region_grid_area(region, xc[None, :], grid) for xc in contexts]
        return ar.AreaEstimate(float(np.mean(vals)), 0.0, len(vals))
    return ar.region_area(region, contexts, cfg.mc_samples, rng, cfg.mc_samples_global)


# ---------------------------------------------------------------------------
# run / sweep / compare


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("JAPAN_THREADS", "1")))
    except ValueError:
        return 1


def run(cfg: ExperimentConfig, out_dir: str | None = None, echo=None,
        cache_dir: str | None = None, write: bool = True) -> list[ExperimentResult]:
    """Every (seed, method, epsilon) cell; writes ``results.csv`` under ``out_dir``."""
    dataset = load_dataset(cfg.dataset, cache_dir)
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        per_seed = list(pool.map(lambda s: run_seed(cfg, dataset, s), cfg.seeds))
    order = {m: i for i, m in enumerate(cfg.methods)}
    results = sorted((r for rows in per_seed for r in rows),
                     key=lambda r: (order[r.method], r.seed, r.epsilon))
    if echo is not None:
        for r in results:
            echo.write(json.dumps(asdict(r)) + "\n")
    if not cfg.timing:
        for r in results:
            r.seconds = 0.0
    if write:
        path = Path(out_dir or cfg.output_dir)
        path.mkdir(parents=True, exist_ok=True)
        write_results(results, path / "results.csv")
    return results


def write_results(results, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_COLUMNS)
        for r in results:
            writer.writerow(r.row())


def read_results(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in RESULT_COLUMNS:
            if col not in header:
                raise ValueError(f"{path}: missing column {col!r}")
        rows = []
        for line_no, rec in enumerate(reader, start=2):
            try:
                rows.append({**rec, "seed": int(rec["seed"]),
                             **{k: float(rec[k]) for k in ("epsilon", "coverage", "area",
                                                            "area_se", "train_nll", "seconds")}})
            except ValueError as exc:
                raise ValueError(f"{path}: row {line_no}: {exc}") from None
    return rows


@dataclass
class CurvePoint:
    method: str
    epsilon: float
    coverage: float
    area: float
    n_seeds: int


def sweep(cfg: ExperimentConfig, out_dir: str | None = None, echo=None,
          cache_dir: str | None = None, write: bool = True) -> list[CurvePoint]:
    """Calibration curve: coverage and area per (method, epsilon), averaged over seeds."""
    if len(cfg.epsilons) < 2:
        raise ConfigError("a sweep needs at least two epsilon values")
    results = run(cfg, out_dir, echo, cache_dir, write)
    curve = []
    for method in cfg.methods:
        for eps in sorted(cfg.epsilons):
            rows = [r for r in results if r.method == method and r.epsilon == eps]
            curve.append(CurvePoint(method, eps, float(np.mean([r.coverage for r in rows])),
                                    float(np.mean([r.area for r in rows])), len(rows)))
    if write:
        path = Path(out_dir or cfg.output_dir)
        with open(path / "curve.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["method", "epsilon", "coverage", "area", "n_seeds"])
            for p in curve:
                writer.writerow([p.method, repr(p.epsilon), repr(p.coverage), repr(p.area), p.n_seeds])
    return curve


@dataclass
class Summary:
    dataset: str
    method: str
    epsilon: float
    n: int
    coverage_mean: float
    coverage_std: float
    area_mean: float
    area_std: float


def _sample_std(values) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def compare(results_csv) -> list[Summary]:
    """Mean and sample std (n - 1 divisor) across seeds, smallest mean area first."""
    rows = read_results(results_csv)
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["dataset"], r["method"], r["epsilon"]), []).append(r)
    out = []
    for (dataset, method, eps), rs in groups.items():
        cov = [r["coverage"] for r in rs]
        area = [r["area"] for r in rs]
        out.append(Summary(dataset, method, eps, len(rs), float(np.mean(cov)), _sample_std(cov),
                           float(np.mean(area)), _sample_std(area)))
    out.sort(key=lambda s: (s.dataset, s.epsilon, s.area_mean, s.method))
    return out


def format_summary(summary: list[Summary]) -> str:
    header = ("dataset", "method", "epsilon", "n", "coverage", "area")
    body = [(s.dataset, s.method, f"{s.epsilon:g}", str(s.n),
             f"{s.coverage_mean:.4f} ± {s.coverage_std:.4f}",
             f"{s.area_mean:.4f} ± {s.area_std:.4f}") for s in summary]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header, *body]]
    return "\n".join(lines) + "\n"


def write_summary(summary: list[Summary], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["dataset", "method", "epsilon", "n", "coverage_mean", "coverage_std",
                         "area_mean", "area_std"])
        for s in summary:
            writer.writerow([s.dataset, s.method, repr(s.epsilon), s.n, repr(s.coverage_mean),
                             repr(s.coverage_std), repr(s.area_mean), repr(s.area_std)])
