"""Pipeline stages.  Each stage reads declared inputs (raw files or earlier
stage outputs) and writes one directory under the output root.  A stage
builds its directory under a temporary name and renames it on success, so a
failed stage leaves nothing behind.
"""
from __future__ import annotations

import json
import logging
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from . import downscale as D
from . import explain as E
from . import features as F
from . import gbdt, geo, grassland, reconcile
from . import select as S
from . import validation as V

log = logging.getLogger("fertgrid")

STAGES = ("ingest", "train", "explain", "shares", "adjust", "downscale", "validate")
TOP_K = 10


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


def record(stage: str, key: str, metric: str, value) -> None:
    """One structured log line per measured quantity."""
    if isinstance(value, float):
        value = f"{value:.10g}"
    log.info("stage=%s key=%s metric=%s value=%s", stage, key, metric, value)


def workers() -> int:
    raw = os.environ.get("FERTGRID_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"FERTGRID_WORKERS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("FERTGRID_WORKERS must be >= 1")
    return n


# ---------------------------------------------------------------------------
# configuration


@dataclass
class PipelineConfig:
    root: Path
    seed: int
    years: list[int]
    base_year: int
    paths: dict[str, Path]
    out: Path
    model: dict = field(default_factory=dict)
    grid: geo.GridSpec | None = None
    stages: dict[str, bool] = field(default_factory=dict)

    def path(self, key: str) -> Path:
        if key not in self.paths:
            raise ConfigError(f"config has no path for {key!r}")
        p = self.paths[key]
        if not p.exists():
            raise ConfigError(f"{key} input {p} does not exist")
        return p

    def stage_dir(self, stage: str) -> Path:
        return self.out / stage

    def artifact(self, stage: str, name: str) -> Path:
        p = self.stage_dir(stage) / name
        if not p.exists():
            raise DataError(f"missing artifact {p} (run the '{stage}' stage first)")
        return p


def load_config(path, seed: int | None = None, out: str | None = None) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    root = path.parent.resolve()
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["output"] = out
    if "seed" not in raw:
        raise ConfigError("a seed is required")
    for key in ("years", "paths"):
        if key not in raw:
            raise ConfigError(f"config lacks {key!r}")
    paths = {k: (root / v) for k, v in raw["paths"].items()}
    out_dir = root / raw.get("output", "out")
    grid = None
    if raw.get("grid"):
        try:
            grid = geo.GridSpec(**raw["grid"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad grid override: {exc}") from None
    years = [int(y) for y in raw["years"]]
    return PipelineConfig(root, int(raw["seed"]), years, int(raw.get("base_year", 2000)), paths, out_dir,
                          raw.get("model", {}), grid, {s: bool(v) for s, v in raw.get("stages", {}).items()})


class _StageDir:
    """Build a stage directory under a temporary name; swap it in on success."""

    def __init__(self, cfg: PipelineConfig, stage: str):
        self.final = cfg.stage_dir(stage)
        self.tmp = cfg.out / f".{stage}.partial"

    def __enter__(self) -> Path:
        shutil.rmtree(self.tmp, ignore_errors=True)
        self.tmp.mkdir(parents=True)
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        shutil.rmtree(self.final, ignore_errors=True)
        self.tmp.rename(self.final)
        return False


# ---------------------------------------------------------------------------
# shared helpers


def encode(features: pd.DataFrame, nutrient: str):
    """Model matrix for ``nutrient`` over every row of the feature table."""
    cols = [c for c in features.columns]
    try:
        used = F.features_for(nutrient, cols)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    table = features[used]
    return F.one_hot_encode(table, [c for c in F.CATEGORICAL if c in used])


def _labels_wide(labels: pd.DataFrame) -> pd.DataFrame:
    return labels.pivot_table(index=["country", "crop", "year"], columns="nutrient", values="rate",
                              aggfunc="first").reset_index()


def _training_rows(cfg):
    feats = F.read_table(cfg.artifact("ingest", "features.csv"))
    labels = _labels_wide(F.read_table(cfg.artifact("ingest", "labels.csv")))
    keyed = feats.reset_index().merge(labels, on=["country", "crop", "year"], how="inner")
    return feats, keyed


def _search_grid(cfg):
    model = cfg.model or {}
    if "config" in model:
        return [gbdt.GbdtConfig(**{S.PARAM_ALIASES.get(k, k): v for k, v in model["config"].items()},
                                seed=cfg.seed)]
    grid = model.get("grid", S.HGB_GRID)
    try:
        return S.expand_grid(grid, gbdt.GbdtConfig(seed=cfg.seed))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad model grid: {exc}") from None


# ---------------------------------------------------------------------------
# stages


def ingest(cfg: PipelineConfig) -> None:
    rates = F.read_table(cfg.path("rates"))
    feats = F.read_table(cfg.path("features"))
    missing = {"country", "crop", "year", "nutrient", "rate"} - set(rates.columns)
    if missing:
        raise DataError(f"rate table lacks columns {sorted(missing)}")
    if "season" in rates and "year" not in rates:
        rates["year"] = rates["season"].map(F.season_start_year)
    bad = set(rates["crop"]) - set(F.CROP_CLASSES)
    if bad:
        raise DataError(f"unknown crop classes {sorted(bad)}")
    n0 = len(rates)
    if "source_date" in rates:
        rates = F.resolve_duplicates(rates)
    rates, n_anom = F.filter_anomalies(rates)
    labeled = F.select_labeled(rates)
    feats = feats[feats["year"].isin(cfg.years)].sort_values(["country", "crop", "year"]).reset_index(drop=True)
    if feats.duplicated(["country", "crop", "year"]).any():
        raise DataError("feature table has duplicate (country, crop, year) rows")
    with _StageDir(cfg, "ingest") as d:
        F.write_table(labeled[["country", "crop", "year", "nutrient", "rate"]], d / "labels.csv")
        F.write_table(feats, d / "features.csv")
    record("ingest", "rates", "rows_in", n0)
    record("ingest", "rates", "anomalies_removed", n_anom)
    record("ingest", "rates", "labeled_rows", len(labeled))
    record("ingest", "features", "rows", len(feats))


def train(cfg: PipelineConfig) -> None:
    feats, keyed = _training_rows(cfg)
    configs = _search_grid(cfg)
    k_outer = int(cfg.model.get("k_outer", 2))
    k_inner = int(cfg.model.get("k_inner", 5))
    table, selection = [], {}
    with _StageDir(cfg, "train") as d:
        for nut in F.NUTRIENTS:
            matrix, _ = encode(feats, nut)
            rows = keyed["index"].to_numpy()
            X = matrix.take(rows)
            y = keyed[nut].to_numpy(dtype=np.float64)
            if len(y) < k_outer * k_inner:
                raise DataError(f"{nut}: {len(y)} labeled rows cannot fill {k_outer}x{k_inner} folds")
            result = S.nested_cv(X, y, configs, k_outer=k_outer, k_inner=k_inner, seed=cfg.seed)
            best = result.majority_config()
            model = gbdt.fit(X, y, best)
            gbdt.save(model, d / f"model_{nut}.txt")
            table.append((nut, "HGB", result.report))
            table.append((nut, "naive", result.naive_report))
            selection[nut] = {"refit": best.as_dict(), "n_rows": int(len(y)),
                              "outer": [f.config.as_dict() for f in result.folds]}
            for name, (mean, sd) in result.report.summary().items():
                record("train", nut, name, mean)
                record("train", nut, name + "_sd", sd)
            record("train", nut, "naive_r2", result.naive_report.mean("r2"))
        (d / "metrics.tsv").write_text(S.format_metrics_table(table))
        (d / "selection.json").write_text(json.dumps(selection, indent=1, sort_keys=True) + "\n")


def explain(cfg: PipelineConfig) -> None:
    feats, keyed = _training_rows(cfg)
    n_workers = workers()
    with _StageDir(cfg, "explain") as d:
        for nut in F.NUTRIENTS:
            model = gbdt.load(cfg.artifact("train", f"model_{nut}.txt"))
            matrix, grouping = encode(feats, nut)
            if matrix.n_cols != model.n_features:
                raise DataError(f"{nut}: model expects {model.n_features} columns, features give {matrix.n_cols}")
            X = matrix.values[keyed["index"].to_numpy()]
            shap = E.shap_values(model, X, matrix.columns, workers=n_workers)
            pred = gbdt.predict(model, X)
            eff = float(np.max(np.abs(shap.values.sum(axis=1) + shap.base_value - pred)))
            grouped = E.aggregate_groups(shap, grouping)
            ids = [f"{c}|{k}|{y}" for c, k, y in keyed[["country", "crop", "year"]].itertuples(index=False)]
            header = [f"rows: all labeled rows (n={len(ids)})", f"nutrient: {nut}"]
            (d / f"shap_{nut}.tsv").write_text(E.format_shap_matrix(grouped, row_ids=ids, header=header))
            ranking = E.importance_ranking(grouped, top_k=TOP_K)
            (d / f"ranking_{nut}.tsv").write_text(E.format_ranking(ranking, F.categories(grouping)))
            pts = pd.DataFrame(E.beeswarm_points(shap, X), columns=["row", "feature", "shap", "value"])
            F.write_table(pts, d / f"beeswarm_{nut}.tsv", sep="\t")
            record("explain", nut, "efficiency_max_abs", eff)
            record("explain", nut, "top_feature", ranking[0][0])


def shares(cfg: PipelineConfig) -> None:
    try:
        rules, data = grassland.load_rules(cfg.path("rules"))
    except (KeyError, TypeError, yaml.YAMLError) as exc:
        raise ConfigError(f"bad rule file: {exc}") from None
    series = [grassland.apply_country_rule(r, data) for r in rules]
    table = grassland.share_table(series)
    table = table[table["year"].isin(cfg.years)].reset_index(drop=True)
    with _StageDir(cfg, "shares") as d:
        F.write_table(table, d / "shares.csv")
    record("shares", "all", "series", len(series))
    record("shares", "all", "clamped", int(sum(s.n_clamped for s in series)))


def adjust(cfg: PipelineConfig) -> None:
    feats = F.read_table(cfg.artifact("ingest", "features.csv"))
    areas = F.read_table(cfg.path("areas"))
    budgets = F.read_table(cfg.path("budgets"))
    share = F.read_table(cfg.artifact("shares", "shares.csv"))
    parts = []
    for nut in F.NUTRIENTS:
        model = gbdt.load(cfg.artifact("train", f"model_{nut}.txt"))
        matrix, _ = encode(feats, nut)
        pred = gbdt.predict(model, matrix)
        n_neg = int((pred < 0).sum())
        if n_neg:
            record("adjust", nut, "negative_predictions_clipped", n_neg)
        parts.append(feats[["country", "crop", "year"]].assign(nutrient=nut, rate=np.maximum(pred, 0.0)))
    pred = pd.concat(parts, ignore_index=True)
    pred = pred.merge(areas, on=["country", "crop", "year"], how="left")
    if pred["area"].isna().any():
        raise DataError("harvested area missing for some (country, crop, year)")
    b = budgets.merge(share[["country", "nutrient", "year", "share"]], on=["country", "nutrient", "year"], how="left")
    if b["share"].isna().any():
        k = b.loc[b["share"].isna(), ["country", "nutrient", "year"]].iloc[0].tolist()
        raise DataError(f"no grassland share for {k}")
    b = b.rename(columns={"share": "grass_share"})
    try:
        out = reconcile.adjust_table(pred, b)
    except KeyError as exc:
        raise DataError(str(exc)) from None
    with _StageDir(cfg, "adjust") as d:
        F.write_table(out, d / "rates.csv")
    for nut, g in out.groupby("nutrient"):
        record("adjust", nut, "scale_min", float(g["scale"].min()))
        record("adjust", nut, "scale_max", float(g["scale"].max()))


def _read_inputs(cfg):
    rdir = cfg.path("rasters")
    def rd(name):
        p = rdir / name
        if not p.exists():
            raise DataError(f"missing raster {p}")
        return geo.read_raster(p)
    base = {c: rd(f"base_{c}.tiff") for c in F.CROP_CLASSES}
    spec = next(iter(base.values())).spec
    if cfg.grid is not None and cfg.grid != spec:
        raise ConfigError(f"grid override {cfg.grid} does not match the input rasters {spec}")
    years = sorted(set(cfg.years) | {cfg.base_year})
    nr = {y: rd(f"cropland_nr_{y}.tiff").values for y in years}
    r = {y: rd(f"cropland_r_{y}.tiff").values for y in years}
    fracs = {}
    for p in sorted(rdir.glob("country_*.tiff")):
        fracs[p.stem[len("country_"):]] = np.nan_to_num(geo.read_raster(p).values)
    if not fracs:
        raise DataError("no country fraction rasters")
    for name, ras in base.items():
        if ras.spec != spec:
            raise DataError(f"base map {name} is on a different grid")
    return spec, {c: np.nan_to_num(v.values) for c, v in base.items()}, nr, r, fracs


def downscale_year(spec, base, nr, r, fracs, base_year, year, areas, rates, ratios):
    """Harvested area (crop, cell) and fertilizer mass (crop, nutrient, cell) for one year."""
    cell_area = geo.area_grid(spec)
    crops0 = sum(base.values())
    layers = np.stack([D.build_harea_year(base[c], crops0, nr[base_year], r[year], nr[year],
                                          c == "Rice", cell_area, ratios[c]) for c in F.CROP_CLASSES])
    layers = D.cap_layers(layers, cell_area)
    harea = np.zeros_like(layers)
    mass = np.zeros((len(F.CROP_CLASSES), len(F.NUTRIENTS)) + spec.shape)
    rounds = 0
    for country, frac in fracs.items():
        cells = frac > 0
        f = frac[cells]
        totals = np.array([areas.get((country, c, year), 0.0) for c in F.CROP_CLASSES])
        P, n = D.align_joint(layers[:, cells] * f, totals, cell_area[cells] * f)
        rounds = max(rounds, n)
        harea[:, cells] += P
        for k, crop in enumerate(F.CROP_CLASSES):
            for n_i, nut in enumerate(F.NUTRIENTS):
                rate = rates.get((country, crop, year, nut), 0.0)
                mass[k, n_i][cells] += P[k] * rate
    return harea, mass, rounds


def downscale(cfg: PipelineConfig) -> None:
    spec, base, nr, r, fracs = _read_inputs(cfg)
    adj = F.read_table(cfg.artifact("adjust", "rates.csv"))
    area_tab = F.read_table(cfg.path("areas"))
    areas = {(c, k, int(y)): float(a) for c, k, y, a in area_tab[["country", "crop", "year", "area"]].itertuples(index=False)}
    rates = {(c, k, int(y), n): float(v) for c, k, y, n, v in
             adj[["country", "crop", "year", "nutrient", "rate_adjusted"]].itertuples(index=False)}
    ratios = {c: D.neighbor_ratios(base[c], nr[cfg.base_year]) for c in F.CROP_CLASSES}
    task = lambda y: downscale_year(spec, base, nr, r, fracs, cfg.base_year, y, areas, rates, ratios)
    with ThreadPoolExecutor(workers()) as pool:
        results = dict(zip(cfg.years, pool.map(task, cfg.years)))
    with _StageDir(cfg, "downscale") as d:
        (d / "harea").mkdir()
        written = []
        for y in cfg.years:
            harea, mass, rounds = results[y]
            record("downscale", str(y), "redistribution_rounds", rounds)
            for k, crop in enumerate(F.CROP_CLASSES):
                p = d / "harea" / f"{crop}{y}.tiff"
                geo.write_raster(geo.Raster(spec, harea[k], "ha"), p)
                written.append(p)
                for n_i, nut in enumerate(F.NUTRIENTS):
                    p = d / D.layer_name(crop, nut, y)
                    geo.write_raster(geo.Raster(spec, mass[k, n_i], "kg"), p)
                    written.append(p)
        D.write_manifest(written, d / "manifest.json")
        # end-to-end check: crop mass per country equals the net budget
        nb = adj.groupby(["country", "year", "nutrient"])["net_budget"].first().to_dict()
        worst = 0.0
        for y in cfg.years:
            mass = results[y][1]
            for country, frac in fracs.items():
                for n_i, nut in enumerate(F.NUTRIENTS):
                    got = float((mass[:, n_i] * (frac > 0)).sum()) / 1e3
                    want = nb.get((country, y, nut), 0.0)
                    worst = max(worst, abs(got - want) / want if want else abs(got))
        record("downscale", "all", "layers", len(written))
        record("downscale", "all", "budget_rel_err_max", worst)


def validate(cfg: PipelineConfig) -> None:
    adj = F.read_table(cfg.artifact("adjust", "rates.csv"))
    ref = F.read_table(cfg.path("reference"))
    rows = []
    with _StageDir(cfg, "validate") as d:
        (d / "series").mkdir()
        for (country, crop), g in ref.groupby(["country", "crop"], sort=True):
            mine = adj[(adj["country"] == country) & (adj["crop"] == crop)]
            pred = {n: dict(zip(h["year"], h["rate_adjusted"])) for n, h in mine.groupby("nutrient")}
            refs = {n: dict(zip(h["year"], h["rate"])) for n, h in g.groupby("nutrient")}
            if all(n in pred and n in refs for n in F.NUTRIENTS):
                pred["NPK"] = V.npk_sum_series(*(pred[n] for n in F.NUTRIENTS))
                refs["NPK"] = V.npk_sum_series(*(refs[n] for n in F.NUTRIENTS))
            try:
                found = V.comparison_rows(country, crop, pred, refs)
            except ValueError as exc:
                raise DataError(f"{country}/{crop}: {exc}") from None
            rows.extend(found)
            for nut in refs:
                if nut in pred:
                    F.write_table(V.comparison_export(pred[nut], refs[nut]),
                                  d / "series" / f"{country}_{crop}_{nut}.csv")
        text, machine = V.emit_validation_table(rows)
        (d / "validation.tsv").write_text(text)
        F.write_table(machine, d / "validation.csv")
    for r in rows:
        record("validate", f"{r.country}/{r.crop}/{r.nutrient}", "mae", r.mae)
        record("validate", f"{r.country}/{r.crop}/{r.nutrient}", "mape", r.mape)


RUNNERS = {"ingest": ingest, "train": train, "explain": explain, "shares": shares,
           "adjust": adjust, "downscale": downscale, "validate": validate}


def run_pipeline(cfg: PipelineConfig) -> None:
    for stage in STAGES:
        if cfg.stages.get(stage, True):
            RUNNERS[stage](cfg)
