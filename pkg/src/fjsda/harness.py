"""Experiment orchestration for the hexagon benchmark.

A run trains every configured method on fresh data for every seed, scores
each predictor by Gaussian NLL on a held-out target sample and aggregates
mean and sample standard deviation per method. Reports and emitted CSV
files are byte-for-byte reproducible from the config.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import adaptation, toy
from .adaptation import METHODS, TrainConfig, TrainedPredictor, predict
from .importance import FittedImportance, ImportanceConfig, fit_unsupervised, quadrant_products
from .nets import gaussian_nll_loss

SQRT3 = math.sqrt(3.0)
CURVE_POINTS = 201
GRID_POINTS = 101
REPORT_FIELDS = ("config", "config_digest", "cells", "aggregate", "importance", "digest")
CELL_FIELDS = ("method", "seed", "status", "nll", "error")


class ConfigError(ValueError):
    pass


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ExperimentConfig:
    vertices: tuple = toy.DEFAULT_VERTICES
    counts: tuple = toy.DEFAULT_COUNTS
    n_target: int = 3000
    n_eval: int = 10000
    methods: tuple = METHODS
    seeds: tuple = (0, 1, 2, 3, 4)
    lam: float = 1.0
    bins: int = 2
    train: dict = field(default_factory=dict)
    importance: dict = field(default_factory=dict)
    eval_on_train: bool = False
    out_dir: str | None = None

    def __post_init__(self):
        self.vertices = tuple(tuple(float(c) for c in v) for v in self.vertices)
        self.counts = tuple(int(c) for c in self.counts)
        self.methods = tuple(self.methods)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.validate()

    def validate(self) -> None:
        if not self.methods:
            raise ConfigError("methods must be non-empty")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("methods must be distinct")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be non-empty and distinct")
        if self.n_target < 1 or self.n_eval < 1:
            raise ConfigError("n_target and n_eval must be positive")
        if self.lam < 0 or self.bins < 2:
            raise ConfigError("need lam >= 0 and bins >= 2")
        for name, cls in (("train", TrainConfig), ("importance", ImportanceConfig)):
            known = {f.name for f in fields(cls)} - {"seed"}
            extra = set(getattr(self, name)) - known
            if extra:
                raise ConfigError(f"unknown {name} settings {sorted(extra)}")
        try:
            toy.SourceSpec(self.counts)
            self.hexagon
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def hexagon(self) -> toy.HexagonSpec:
        return toy.HexagonSpec(self.vertices)

    @property
    def source_spec(self) -> toy.SourceSpec:
        return toy.SourceSpec(self.counts)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(**{**self.train, "seed": seed})

    def importance_config(self, seed: int) -> ImportanceConfig:
        return ImportanceConfig(**{**self.importance, "seed": seed})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hexagon"] = {"vertices": [list(v) for v in d.pop("vertices")]}
        d["source"] = {"counts": list(d.pop("counts"))}
        for k in ("methods", "seeds"):
            d[k] = list(d[k])
        for k in ("train", "importance"):
            d[k] = {a: list(b) if isinstance(b, tuple) else b for a, b in d[k].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)} | {"hexagon", "source"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        d = dict(d)
        if "hexagon" in d:
            d["vertices"] = d.pop("hexagon")["vertices"]
        if "source" in d:
            d["counts"] = d.pop("source")["counts"]
        for k in ("train", "importance"):
            if k in d:
                d[k] = {a: tuple(b) if isinstance(b, list) else b for a, b in d[k].items()}
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(d)

    def digest(self) -> str:
        # the output location does not change results
        d = self.to_dict()
        d.pop("out_dir")
        return _digest(d)


# ----------------------------------------------------------------- data


def seed_data(cfg: ExperimentConfig, seed: int):
    """(source, target, eval) datasets for one seed; each draws its own stream."""
    spec = cfg.hexagon
    source = toy.sample_source(spec, cfg.source_spec, seed=1000 * seed + 1)
    target = toy.sample_target(spec, cfg.n_target, seed=1000 * seed + 2)
    if cfg.eval_on_train:
        return source, target, target
    return source, target, toy.sample_target(spec, cfg.n_eval, seed=1000 * seed + 3)


def evaluate_nll(model, x, y) -> float:
    """Mean Gaussian NLL of labeled target points under a (mu, sigma) model.

    ``model`` is a TrainedPredictor or any callable returning (mu, sigma).
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.size == 0 or x.shape != y.shape:
        raise ValueError("need matching non-empty x and y")
    mu, sigma = predict(model, x) if isinstance(model, TrainedPredictor) else model(x)
    loss, _, _ = gaussian_nll_loss(np.asarray(mu, float), np.log(sigma), y)
    return float(np.mean(loss))


class OptimalModel:
    """The analytic target-optimal Gaussian predictor as a callable model."""

    def __init__(self, spec: toy.HexagonSpec = toy.HexagonSpec()):
        self.spec = spec

    def __call__(self, x):
        out = np.array([toy.optimal_gaussian(self.spec, float(v)) for v in np.atleast_1d(x)])
        return out[:, 0], out[:, 1]


# ---------------------------------------------------------------- cells


def train_method(method: str, source: toy.Dataset, target: toy.Dataset, cfg: ExperimentConfig,
                 seed: int, importance: FittedImportance | None = None):
    """Train one method; returns (model, fitted importance or None)."""
    tc = cfg.train_config(seed)
    xs, ys, xt = source.x, source.y, target.x
    if method == "source_only":
        return adaptation.train_plain(xs, ys, tc, method=method), None
    if method == "target_only":
        return adaptation.train_plain(xt, target.y, tc, method=method), None
    if method == "ssbc":
        w = adaptation.ssbc_weights(xs, xt, adaptation.ClassifierConfig(seed=seed))
        return adaptation.train_plain(xs, ys, tc, weights=w, method=method), None
    if method == "bbsc":
        w, _ = adaptation.bbsc_weights(xs, ys, xt, cfg.bins, adaptation.ClassifierConfig(seed=seed))
        return adaptation.train_plain(xs, ys, tc, weights=w, method=method), None
    if method == "dann":
        return adaptation.train_adversarial(xs, ys, xt, None, cfg.lam, tc, method=method), None
    if method == "iwdan":
        w, _ = adaptation.bbsc_weights(xs, ys, xt, cfg.bins, adaptation.ClassifierConfig(seed=seed))
        return adaptation.train_adversarial(xs, ys, xt, w, cfg.lam, tc, method=method), None
    if method == "jiada":
        if importance is None:
            importance = fit_unsupervised(xs, ys, xt, cfg.importance_config(seed))
        w = importance.weights(xs, ys)
        return adaptation.train_adversarial(xs, ys, xt, w, cfg.lam, tc, method=method), importance
    raise ConfigError(f"unknown method {method!r}")


def _run_cell(args):
    cfg, method, seed = args
    source, target, ev = seed_data(cfg, seed)
    try:
        model, fitted = train_method(method, source, target, cfg, seed)
        nll = evaluate_nll(model, ev.x, ev.y)
        if not math.isfinite(nll):
            raise FloatingPointError("non-finite NLL")
        cell = {"method": method, "seed": seed, "status": "ok", "nll": nll, "error": None}
        return cell, model, fitted
    except Exception as exc:  # a failed cell must not abort the others
        msg = "".join(traceback.format_exception_only(type(exc), exc)).strip()
        return {"method": method, "seed": seed, "status": "failed", "nll": None, "error": msg}, None, None


def aggregate(cells: list[dict]) -> dict:
    """Per-method mean and sample standard deviation over successful cells."""
    out = {}
    for m in dict.fromkeys(c["method"] for c in cells):
        vals = [c["nll"] for c in cells if c["method"] == m and c["status"] == "ok"]
        mean = float(np.mean(vals)) if vals else None
        std = float(np.std(vals, ddof=1)) if len(vals) > 1 else (0.0 if vals else None)
        out[m] = {"mean": mean, "std": std, "n": len(vals)}
    return out


def importance_metrics(cfg: ExperimentConfig, fitted: dict[int, FittedImportance]) -> dict | None:
    """Per-quadrant U*V means over each seed's source sample, and their errors."""
    if not fitted:
        return None
    w = np.asarray(toy.ground_truth_importance(cfg.hexagon, cfg.source_spec).w_per_quadrant)
    per_seed = {}
    for seed, f in sorted(fitted.items()):
        source, _, _ = seed_data(cfg, seed)
        per_seed[str(seed)] = quadrant_products(f, source.x, source.y).tolist()
    mean = np.mean(list(per_seed.values()), axis=0)
    return {
        "w_true": w.tolist(),
        "per_seed": per_seed,
        "per_seed_rel_error": {s: (np.asarray(p) / w - 1).tolist() for s, p in per_seed.items()},
        "mean_products": mean.tolist(),
        "rel_error": (mean / w - 1).tolist(),
    }


@dataclass
class RunReport:
    config: dict
    config_digest: str
    cells: list
    aggregate: dict
    importance: dict | None
    models: dict = field(default_factory=dict, repr=False, compare=False)
    fitted: dict = field(default_factory=dict, repr=False, compare=False)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in REPORT_FIELDS if k != "digest"}
        d["digest"] = _digest(d)
        return d

    @property
    def digest(self) -> str:
        return self.to_dict()["digest"]

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        missing = set(REPORT_FIELDS) - set(d)
        if missing:
            raise ValueError(f"report missing fields {sorted(missing)}")
        for c in d["cells"]:
            if set(c) != set(CELL_FIELDS):
                raise ValueError(f"bad cell entry {c}")
        return cls(d["config"], d["config_digest"], d["cells"], d["aggregate"], d["importance"])

    @classmethod
    def load(cls, path) -> "RunReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @property
    def failed(self) -> list:
        return [c for c in self.cells if c["status"] != "ok"]

    def table(self) -> str:
        lines = [f"{'method':<12} {'NLL':>8}   {'std':>6}  n"]
        for m, a in self.aggregate.items():
            if a["mean"] is None:
                lines.append(f"{m:<12} {'failed':>8}")
            else:
                lines.append(f"{m:<12} {a['mean']:8.4f} ± {a['std']:.4f}  {a['n']}")
        if self.importance:
            err = ", ".join(f"{q}:{e:+.3f}" for q, e in zip(toy.QUADRANTS, self.importance["rel_error"]))
            lines.append(f"jiada U*V relative error per quadrant: {err}")
        return "\n".join(lines)


def run_experiment(cfg: ExperimentConfig, jobs: int = 1, log=None) -> RunReport:
    """Train and score every (method, seed) cell; deterministic given ``cfg``."""
    tasks = [(cfg, m, s) for s in cfg.seeds for m in cfg.methods]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_run_cell, tasks))
    else:
        results = []
        for t in tasks:
            t0 = time.perf_counter()
            results.append(_run_cell(t))
            if log:
                c = results[-1][0]
                log(f"{c['method']:<12} seed {c['seed']}: {c['status']} "
                    f"nll={c['nll']} ({time.perf_counter() - t0:.1f}s)")
    cells = [r[0] for r in results]
    models = {(c["method"], c["seed"]): r[1] for c, r in zip(cells, results) if r[1] is not None}
    fitted = {c["seed"]: r[2] for c, r in zip(cells, results) if r[2] is not None}
    return RunReport(cfg.to_dict(), cfg.digest(), cells, aggregate(cells),
                     importance_metrics(cfg, fitted), models, fitted)


# ---------------------------------------------------------------- plots


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in r])


def write_curve(model, spec: toy.HexagonSpec, path) -> None:
    x = np.linspace(-1.0, 1.0, CURVE_POINTS)
    mu, sigma = predict(model, x) if isinstance(model, TrainedPredictor) else model(x)
    rows = []
    for xi, m, s in zip(x, mu, sigma):
        a, b = toy.conditional_slice(spec, float(xi))
        rows.append((float(xi), float(m), float(m - SQRT3 * s), float(m + SQRT3 * s), a, b))
    _write_rows(path, ("x", "mu", "lo", "hi", "true_a", "true_b"), rows)


def importance_grid(fitted: FittedImportance, spec: toy.HexagonSpec, counts: toy.SourceSpec):
    """Rows (x, y, u, v, w, w_true) over the grid points inside the hexagon."""
    g = np.linspace(-1.0, 1.0, GRID_POINTS)
    X, Y = np.meshgrid(g, g)
    X, Y = X.ravel(), Y.ravel()
    keep = toy.contains(spec, np.c_[X, Y])
    X, Y = X[keep], Y[keep]
    u, v = fitted.U(X), fitted.V(Y)
    w_true = np.asarray(toy.ground_truth_importance(spec, counts).w_per_quadrant)[toy.quadrant_index(X, Y)]
    return np.c_[X, Y, u, v, u * v, w_true]


def write_importance(fitted, spec, counts, path) -> None:
    rows = [tuple(float(v) for v in r) for r in importance_grid(fitted, spec, counts)]
    _write_rows(path, ("x", "y", "u", "v", "w", "w_true"), rows)


def write_stats(spec, counts, path) -> None:
    stats = toy.quadrant_stats(spec, counts)
    keys = list(stats[0])
    _write_rows(path, keys, [tuple(s[k] for k in keys) for s in stats])


def emit_plots(report: RunReport, out_dir) -> list[Path]:
    """Write curve, stats and importance CSVs for the first seed's models."""
    cfg = ExperimentConfig.from_dict(report.config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    seed = cfg.seeds[0]
    for m in cfg.methods:
        model = report.models.get((m, seed))
        if model is not None:
            p = out / f"curve_{m}.csv"
            write_curve(model, cfg.hexagon, p)
            written.append(p)
    p = out / "stats.csv"
    write_stats(cfg.hexagon, cfg.source_spec, p)
    written.append(p)
    if seed in report.fitted:
        p = out / f"importance_{cfg.importance_config(seed).K}.csv"
        write_importance(report.fitted[seed], cfg.hexagon, cfg.source_spec, p)
        written.append(p)
    return written


# ---------------------------------------------------------------- checks


def check_thresholds(report: RunReport) -> list[str]:
    """Benchmark thresholds that a report violates (empty when all hold)."""
    agg = {m: a["mean"] for m, a in report.aggregate.items() if a["mean"] is not None}
    bad = []
    if "target_only" in agg and not 0.59 <= agg["target_only"] <= 0.63:
        bad.append(f"target_only NLL {agg['target_only']:.4f} outside [0.59, 0.63]")
    baselines = [m for m in ("source_only", "ssbc", "bbsc", "dann", "iwdan") if m in agg]
    for m in baselines:
        if agg[m] < 0.70:
            bad.append(f"{m} NLL {agg[m]:.4f} below 0.70")
    if "jiada" in agg:
        if agg["jiada"] > 0.66:
            bad.append(f"jiada NLL {agg['jiada']:.4f} above 0.66")
        if baselines and agg["jiada"] > min(agg[m] for m in baselines) - 0.05:
            bad.append("jiada not 0.05 below the best non-target baseline")
    if report.importance:
        worst = max(abs(e) for e in report.importance["rel_error"])
        if worst > 0.15:
            bad.append(f"importance recovery error {worst:.3f} above 0.15")
    return bad


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(cfg, **kw)
