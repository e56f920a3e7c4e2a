"""Model selection: metrics, the naive mean baseline, grid search and nested CV."""
from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import gbdt
from .gbdt import GbdtConfig

# hyperparameter names as they appear in the tuning tables, mapped onto GbdtConfig
PARAM_ALIASES = {
    "max_iter": "n_trees",
    "n_estimators": "n_trees",
    "colsample_by_tree": "colsample",
    "colsample_bytree": "colsample",
}

HGB_GRID = {
    "max_depth": [2, 5, 10, 20],
    "max_iter": [25, 50, 100, 200, 500],
    "learning_rate": [0.01, 0.1, 0.5, 1.0],
    "min_samples_leaf": [5, 10, 20, 50],
}

XGB_GRID = {
    "max_depth": [2, 3, 4, 5],
    "n_estimators": [25, 50, 100, 200, 300, 400],
    "colsample_by_tree": [0.6, 0.7, 0.8, 0.9, 1.0],
    "subsample": [0.6, 0.7, 0.8, 0.9, 1.0],
    "min_child_weight": [3, 4, 5, 6, 8, 10],
}

METRIC_NAMES = ("mae", "rmse", "mse", "r2")


@dataclass(frozen=True)
class FoldMetrics:
    mae: float
    mse: float
    rmse: float
    r2: float  # NaN when the reference has zero variance

    def as_dict(self) -> dict:
        return {"mae": self.mae, "mse": self.mse, "rmse": self.rmse, "r2": self.r2}


@dataclass
class MetricReport:
    folds: list[FoldMetrics]

    def mean(self, name: str) -> float:
        return float(np.mean([getattr(f, name) for f in self.folds]))

    def sd(self, name: str) -> float:
        # sample sd across folds; a single fold reports 0
        vals = [getattr(f, name) for f in self.folds]
        return float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0

    def summary(self) -> dict[str, tuple[float, float]]:
        return {name: (self.mean(name), self.sd(name)) for name in METRIC_NAMES}


def metrics(y_true, y_pred) -> FoldMetrics:
    y_true = np.asarray(y_true, dtype=np.float64).ravel()
    y_pred = np.asarray(y_pred, dtype=np.float64).ravel()
    if y_true.shape != y_pred.shape or y_true.size == 0:
        raise ValueError("metrics need two vectors of equal, nonzero length")
    err = y_pred - y_true
    mae = float(np.mean(np.abs(err)))
    mse = float(np.mean(err * err))
    ss_tot = float(np.sum((y_true - y_true.mean()) ** 2))
    r2 = 1.0 - float(np.sum(err * err)) / ss_tot if ss_tot > 0 else math.nan
    return FoldMetrics(mae=mae, mse=mse, rmse=math.sqrt(mse), r2=r2)


@dataclass(frozen=True)
class ConstantPredictor:
    value: float

    def predict(self, X) -> np.ndarray:
        n = X.shape[0] if hasattr(X, "shape") else len(X)
        return np.full(n, self.value)


def naive_baseline(train_targets) -> ConstantPredictor:
    y = np.asarray(train_targets, dtype=np.float64)
    if y.size == 0:
        raise ValueError("naive baseline needs at least one training target")
    return ConstantPredictor(float(y.mean()))


def kfold_indices(n_rows: int, k: int, seed: int) -> list[np.ndarray]:
    """Seeded shuffle, then ``k`` contiguous blocks."""
    if k < 2:
        raise ValueError("need at least 2 folds")
    if n_rows < k:
        raise ValueError(f"{n_rows} rows cannot fill {k} folds")
    perm = np.random.default_rng(seed).permutation(n_rows)
    return [np.sort(block) for block in np.array_split(perm, k)]


def expand_grid(grid: Mapping[str, Sequence], base: GbdtConfig | None = None) -> list[GbdtConfig]:
    if not grid:
        raise ValueError("empty search grid")
    base = base or GbdtConfig()
    names = [PARAM_ALIASES.get(k, k) for k in grid]
    for name in names:
        if name not in base.as_dict():
            raise ValueError(f"unknown hyperparameter {name!r}")
    values = list(grid.values())
    if any(len(v) == 0 for v in values):
        raise ValueError("every hyperparameter needs at least one candidate value")
    return [base.replace(**dict(zip(names, combo))) for combo in itertools.product(*values)]


@dataclass
class GridSearchResult:
    best: GbdtConfig
    scores: dict[GbdtConfig, float]
    folds: list[tuple[np.ndarray, np.ndarray]]


def _min_leaf(cfg: GbdtConfig) -> int:
    return max(int(cfg.min_samples_leaf), math.ceil(cfg.min_child_weight), 1)


def _score_configs(X, y, configs, folds) -> dict[GbdtConfig, float]:
    # Two exact shortcuts.  Configs differing only in n_trees share one fit;
    # the smaller ones are prefixes of the largest (tree t never depends on
    # n_trees).  And a fit under looser depth / leaf-size limits whose trees
    # never came near the tighter limits is also the fit under those limits,
    # so the loosest limits are fitted first and reused where they qualify.
    groups: dict[GbdtConfig, list[GbdtConfig]] = {}
    for cfg in configs:
        groups.setdefault(cfg.replace(n_trees=1), []).append(cfg)
    families: dict[GbdtConfig, list[GbdtConfig]] = {}
    for key in groups:
        root = key.replace(max_depth=1, min_samples_leaf=1, min_child_weight=0.0)
        families.setdefault(root, []).append(key)
    total = {cfg: 0.0 for cfg in configs}
    for train, valid in folds:
        Xt = gbdt.FeatureMatrix(X.values[train], X.columns, X.kinds)
        Xv = X.values[valid]
        cache: dict[int, gbdt.BinnedMatrix] = {}
        for keys in families.values():
            # the longest ensemble of the family serves every tree count
            n_trees = max(c.n_trees for key in keys for c in groups[key])
            fitted = []  # (config, realized depth, smallest child, model)
            for key in sorted(keys, key=lambda k: (-k.max_depth, _min_leaf(k))):
                model = next((m for cfg, depth, child, m in fitted
                              if cfg.max_depth >= key.max_depth and _min_leaf(cfg) <= _min_leaf(key)
                              and depth <= key.max_depth and child >= _min_leaf(key)), None)
                if model is None:
                    if key.max_bins not in cache:
                        cache[key.max_bins] = gbdt.build_bins(Xt, key.max_bins)
                    model = gbdt._fit_binned(Xt, cache[key.max_bins], y[train],
                                             key.replace(n_trees=n_trees))
                    fitted.append((key, model.depth(), model.smallest_child(), model))
                members = groups[key]
                counts = sorted({c.n_trees for c in members})
                staged = gbdt.staged_predict(model, Xv, counts)
                for cfg in members:
                    err = staged[counts.index(cfg.n_trees)] - y[valid]
                    total[cfg] += float(err @ err) / len(valid)
    return {cfg: total[cfg] / len(folds) for cfg in configs}


def grid_search(matrix, targets, grid, k_inner: int = 5, seed: int = 0,
                base: GbdtConfig | None = None) -> GridSearchResult:
    """Pick the config with the lowest mean validation MSE over ``k_inner`` folds.

    ``grid`` is either a name -> candidates mapping or an explicit config list.
    Ties go to the earlier grid point.
    """
    X = gbdt.as_matrix(matrix)
    y = np.asarray(targets, dtype=np.float64)
    if k_inner < 2:
        raise ValueError("k_inner must be >= 2")
    configs = list(grid) if isinstance(grid, (list, tuple)) else expand_grid(grid, base)
    if not configs:
        raise ValueError("empty search grid")
    folds = []
    for i, valid in enumerate(kfold_indices(X.n_rows, k_inner, seed)):
        train = np.setdiff1d(np.arange(X.n_rows), valid)
        folds.append((train, valid))
    if len(configs) == 1:
        return GridSearchResult(configs[0], {configs[0]: math.nan}, folds)
    scores = _score_configs(X, y, configs, folds)
    best = min(configs, key=lambda c: (scores[c], configs.index(c)))
    return GridSearchResult(best, scores, folds)


@dataclass
class OuterFold:
    test: np.ndarray
    train: np.ndarray
    config: GbdtConfig
    metrics: FoldMetrics
    naive: FoldMetrics
    inner_folds: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)


@dataclass
class NestedCVResult:
    folds: list[OuterFold]

    @property
    def report(self) -> MetricReport:
        return MetricReport([f.metrics for f in self.folds])

    @property
    def naive_report(self) -> MetricReport:
        return MetricReport([f.naive for f in self.folds])

    @property
    def configs(self) -> list[GbdtConfig]:
        return [f.config for f in self.folds]

    def majority_config(self) -> GbdtConfig:
        """Most frequent outer-fold winner; ties go to the earliest fold."""
        counts = Counter(self.configs)
        top = max(counts.values())
        return next(c for c in self.configs if counts[c] == top)


def nested_cv(matrix, targets, grid, k_outer: int = 2, k_inner: int = 5, seed: int = 0,
              base: GbdtConfig | None = None,
              on_inner: Callable[[int, np.ndarray, np.ndarray], None] | None = None) -> NestedCVResult:
    """Outer folds estimate the error of "grid search, then refit".

    Inner fold indices are reported in the global row numbering, both on the
    returned folds and through ``on_inner(outer_index, inner_train, inner_valid)``.
    """
    X = gbdt.as_matrix(matrix)
    y = np.asarray(targets, dtype=np.float64)
    all_rows = np.arange(X.n_rows)
    out = []
    for i, test in enumerate(kfold_indices(X.n_rows, k_outer, seed)):
        train = np.setdiff1d(all_rows, test)
        search = grid_search(X.take(train), y[train], grid, k_inner=k_inner, seed=seed + 1 + i, base=base)
        inner = [(train[a], train[b]) for a, b in search.folds]
        if on_inner is not None:
            for a, b in inner:
                on_inner(i, a, b)
        model = gbdt.fit(X.take(train), y[train], search.best)
        pred = gbdt.predict(model, X.values[test])
        naive = naive_baseline(y[train]).predict(X.values[test])
        out.append(OuterFold(test, train, search.best, metrics(y[test], pred),
                             metrics(y[test], naive), inner))
    return NestedCVResult(out)


def format_metrics_table(rows: Sequence[tuple[str, str, MetricReport]], sep: str = "\t") -> str:
    """Table of ``fertilizer, model, MAE, RMSE, MSE, R2`` cells as "mean ± sd"."""
    lines = [sep.join(["fertilizer", "model", "MAE", "RMSE", "MSE", "R2"])]
    for fert, model, report in rows:
        cells = []
        for name in METRIC_NAMES:
            mean, sd = report.mean(name), report.sd(name)
            if math.isnan(mean):
                cells.append("NA")
            elif name == "mse" and abs(mean) >= 100:
                cells.append(f"{_tidy(mean, 0):.0f} ± {_tidy(sd, 0):.0f}")
            else:
                cells.append(f"{_tidy(mean, 2):.2f} ± {_tidy(sd, 2):.2f}")
        lines.append(sep.join([fert, model, *cells]))
    return "\n".join(lines) + "\n"


def _tidy(value: float, digits: int) -> float:
    # adding 0.0 turns a rounded -0.0 into 0.0
    return round(value, digits) + 0.0
