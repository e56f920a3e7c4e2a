"""A small synthetic world for end-to-end runs: 10 countries, 13 crops,
3 nutrients, 5 years on a 20 x 20 grid of 5 arc-minute cells.

Everything derives from one seed.  Base-year crop maps are rounded to
float32 so that they survive the GeoTIFF round trip unchanged.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from . import features as F
from . import geo, grassland

YEARS = (1990, 1995, 2000, 2005, 2010)
BASE_YEAR = 2000
N_COUNTRIES = 10
GRID = geo.GridSpec(20, 20, geo.ARCMIN5, west=10.0, north=48.0)
REGIONS = ("North", "South", "East")
RICE = "Rice"


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def country_codes():
    return [f"C{i:02d}" for i in range(1, N_COUNTRIES + 1)]


def country_fractions(spec: geo.GridSpec = GRID) -> dict[str, np.ndarray]:
    """Each country owns a 4 x 10 block of cells."""
    fracs = {}
    for i, code in enumerate(country_codes()):
        m = np.zeros(spec.shape)
        r, c = divmod(i, 2)
        m[4 * r:4 * r + 4, 10 * c:10 * c + 10] = 1.0
        fracs[code] = m
    return fracs


def _smooth(rng, shape, lo, hi):
    # cheap smooth field: a few random planes and bumps
    rr, cc = np.meshgrid(np.linspace(0, 1, shape[0]), np.linspace(0, 1, shape[1]), indexing="ij")
    f = rng.normal() * rr + rng.normal() * cc
    for _ in range(3):
        r0, c0, s = rng.random(), rng.random(), rng.uniform(0.1, 0.4)
        f += rng.normal() * np.exp(-((rr - r0) ** 2 + (cc - c0) ** 2) / (2 * s * s))
    f = (f - f.min()) / (np.ptp(f) or 1.0)
    return lo + (hi - lo) * f


class ToyWorld:
    def __init__(self, seed: int = 0):
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.spec = GRID
        self.countries = country_codes()
        self.fracs = country_fractions(self.spec)
        self.cell_area = geo.area_grid(self.spec)
        owner = np.zeros(self.spec.shape, dtype=int)
        for i, c in enumerate(self.countries):
            owner[self.fracs[c] > 0] = i
        self.owner = owner
        self._maps(rng)
        self._cropland(rng)
        self._areas(rng)
        self._env(rng)
        self._tables(rng)

    # -- rasters -----------------------------------------------------------

    def _maps(self, rng):
        shape = self.spec.shape
        cultivated = rng.random(shape) < 0.8
        # a few dense cells push the alignment into capping
        dense = cultivated & (rng.random(shape) < 0.04)
        intensity = np.where(dense, 0.97, rng.uniform(0.15, 0.55, shape)) * cultivated
        rice_countries = set(rng.choice(self.countries, 4, replace=False))
        rice_ok = np.isin(self.owner, [self.countries.index(c) for c in rice_countries])
        weights = rng.gamma(1.5, 1.0, (len(F.CROP_CLASSES),) + shape)
        weights *= rng.random(weights.shape) < 0.7
        ri = F.CROP_CLASSES.index(RICE)
        weights[ri] *= rice_ok
        weights[0] += 0.05  # every cultivated cell grows some wheat
        shares = weights / weights.sum(axis=0)
        self.base = {crop: _f32(shares[k] * intensity * self.cell_area)
                     for k, crop in enumerate(F.CROP_CLASSES)}
        self.rice_countries = sorted(rice_countries)

    def _cropland(self, rng):
        shape = self.spec.shape
        nonrice = sum(v for c, v in self.base.items() if c != RICE)
        self.crops_2000 = sum(self.base.values())
        self.nr = {}
        self.r = {}
        # base-year cropland covers the non-rice crops exactly where they grow
        nr0 = _f32(nonrice * rng.uniform(1.0, 1.15, shape))
        r0 = self.base[RICE]
        nr0[self.crops_2000 <= 0] = 0.0
        new_land = (self.crops_2000 <= 0) & (rng.random(shape) < 0.5)
        for t, y in enumerate(YEARS):
            if y == BASE_YEAR:
                self.nr[y], self.r[y] = nr0, r0
                continue
            growth = _smooth(rng, shape, 0.8, 1.15)
            nr = nr0 * growth
            if y > BASE_YEAR:
                nr = np.where(new_land, 0.1 * self.cell_area * (y - BASE_YEAR) / 10, nr)
            self.nr[y] = _f32(nr)
            self.r[y] = _f32(r0 * growth)

    def _areas(self, rng):
        from .downscale import build_harea_year, cap_layers

        rows = []
        self.harea_m = {}
        for y in YEARS:
            layers = np.stack([build_harea_year(self.base[c], self.crops_2000, self.nr[BASE_YEAR], self.r[y],
                                                self.nr[y], c == RICE, self.cell_area)
                               for c in F.CROP_CLASSES])
            layers = cap_layers(layers, self.cell_area)
            self.harea_m[y] = layers
            for j, country in enumerate(self.countries):
                m = self.fracs[country]
                for k, crop in enumerate(F.CROP_CLASSES):
                    gridded = float((layers[k] * m).sum())
                    if y == BASE_YEAR:
                        area = float((self.base[crop] * m).sum())
                    else:
                        area = gridded * rng.uniform(0.9, 1.1) if gridded > 0 else 0.0
                    rows.append((country, crop, y, area))
        self.fao_area = pd.DataFrame(rows, columns=["country", "crop", "year", "area"])

    def _env(self, rng):
        shape = self.spec.shape
        self.soil = {name: _smooth(rng, shape, lo, hi) for name, lo, hi in
                     (("soil_n", 50, 400), ("soil_ph", 45, 80), ("soil_ocs", 20, 120), ("soil_clay", 80, 450))}
        self.climate = {}
        for y in YEARS:
            wet = _smooth(rng, shape, 10, 120)
            warm = _smooth(rng, shape, 2, 18)
            season = np.sin(np.linspace(0, 2 * np.pi, 12, endpoint=False))[:, None, None]
            precip = wet[None] * (1 + 0.5 * season)
            temp = warm[None] + 8 * season
            pet = np.maximum(0.5, 1 + 0.15 * temp)
            self.climate[y] = geo.derive_climate(precip, temp, pet)
        # friction for the production-cost proxy: one plant or mine per nutrient
        friction = _smooth(rng, shape, 0.5, 3.0)
        self.production_cost = {}
        for nut in F.NUTRIENTS:
            src = np.zeros(shape, dtype=bool)
            src[rng.integers(shape[0]), rng.integers(shape[1])] = True
            self.production_cost[nut] = geo.cost_distance(friction, src, self.spec) / 1e6

    # -- tables ------------------------------------------------------------

    def _tables(self, rng):
        nc = len(self.countries)
        gdp = dict(zip(self.countries, rng.lognormal(8.5, 0.8, nc)))
        region = {c: REGIONS[i % 3] for i, c in enumerate(self.countries)}
        irrigation = dict(zip(self.countries, rng.uniform(0, 60, nc)))
        crop_effect = {nut: dict(zip(F.CROP_CLASSES, rng.uniform(0.3, 1.6, len(F.CROP_CLASSES))))
                       for nut in F.NUTRIENTS}
        crop_price = dict(zip(F.CROP_CLASSES, rng.uniform(100, 600, len(F.CROP_CLASSES))))
        scale = {"N": 120.0, "P2O5": 45.0, "K2O": 50.0}
        feat_rows, truth = [], {}
        area_of = self.fao_area.set_index(["country", "crop", "year"])["area"].to_dict()
        total_of = self.fao_area.groupby(["country", "year"])["area"].sum().to_dict()
        self.area_of = area_of
        for y in YEARS:
            clim = self.climate[y]
            trend = 1 + 0.01 * (y - 1990)
            cpi = 0.6 + 0.02 * (y - 1990)
            for country in self.countries:
                m = self.fracs[country]
                for crop in F.CROP_CLASSES:
                    a = area_of[(country, crop, y)]
                    env = {k: geo.aggregate_environmental(clim[k], self.base[crop], {country: m})[country]
                           for k in ("map", "mat", "pet", "aridity")}
                    soil = {k: geo.aggregate_environmental(v, self.base[crop], {country: m})[country]
                            for k, v in self.soil.items()}
                    cost = {nut: geo.aggregate_environmental(self.production_cost[nut], self.base[crop],
                                                             {country: m})[country] for nut in F.NUTRIENTS}
                    total_crop = total_of[(country, y)]
                    g = gdp[country] * trend
                    row = dict(country=country, crop=crop, year=y, region=region[country],
                               map=env["map"], mat=env["mat"], pet=env["pet"], aridity=env["aridity"],
                               **soil, crop_area=a, crop_area_perc=100 * a / total_crop if total_crop else np.nan,
                               irrigation=irrigation[country], gdp_per_capita=g,
                               global_crop_price=crop_price[crop] * trend,
                               national_crop_price=F.deflate_prices(crop_price[crop] * trend * rng.uniform(0.8, 1.2), cpi),
                               n_production_cost=cost["N"], p_production_cost=cost["P2O5"],
                               k_production_cost=cost["K2O"])
                    feat_rows.append(row)
                    for nut in F.NUTRIENTS:
                        ari = env["aridity"] if np.isfinite(env["aridity"]) else 1.0
                        rate = scale[nut] * crop_effect[nut][crop] * (0.4 + 0.6 * np.tanh(g / 6000)) \
                            * (0.7 + 0.3 * min(ari, 2.0)) * (1 + irrigation[country] / 200) \
                            * rng.lognormal(0, 0.08)
                        truth[(country, crop, y, nut)] = float(rate)
        feats = pd.DataFrame(feat_rows)
        # a share of the environmental cells goes missing, as in real panels
        for col in ("soil_n", "soil_ph", "irrigation", "national_crop_price"):
            feats.loc[rng.random(len(feats)) < 0.1, col] = np.nan
        self.features = feats
        self.truth = truth
        self._rates(rng)
        self._budgets(rng)
        self._reference(rng)

    def _rates(self, rng):
        rows = []
        for (country, crop, y, nut), rate in self.truth.items():
            present = self.area_of[(country, crop, y)] > 0
            if not present or rng.random() < 0.2:
                continue
            date = f"{y + 2}-06-30"
            rows.append((country, crop, y, nut, rate * rng.lognormal(0, 0.05), date))
            if rng.random() < 0.05:  # an older report with a different number
                rows.append((country, crop, y, nut, rate * 1.5, f"{y + 1}-01-15"))
        rows.append(("C01", "Vegetables", 1995, "N", 7200.0, "2001-01-01"))  # reporting error
        rates = pd.DataFrame(rows, columns=["country", "crop", "year", "nutrient", "rate", "source_date"])
        self.rates = rates.sort_values(["country", "crop", "year", "nutrient", "source_date"]).reset_index(drop=True)

    def _rules(self):
        docs = []
        years = list(range(YEARS[0], YEARS[-1] + 1))
        for i, country in enumerate(self.countries):
            frac = 0.2 + 0.05 * i
            a_a = [1e6 * (1 + 0.002 * (y - 1990)) for y in years]
            a_f = [a * (frac + 0.002 * (y - 1990)) for a, y in zip(a_a, years)]
            kinds = [
                {"method": "mean_r", "r": 0.33},
                {"method": "interp_r", "points": [[1990, 0.2], [2010, 0.6]], "anchors": [[1990, 0.0]]},
                {"method": "fixed", "value": 0.0},
                {"method": "blend", "of": [{"method": "fixed", "value": 0.1}, {"method": "mean_r", "r": 0.5}]},
                {"method": "piecewise", "pieces": [
                    {"span": [1990, 1999], "method": "interp_r", "points": [[1990, 0.1], [1999, 0.4]]},
                    {"span": [2000, 2010], "method": "mean_r", "r": 0.4}]},
                {"method": "midpoint_cap", "of": {"method": "mean_r", "r": 2.5}},
            ]
            rules = [{"nutrient": nut, "span": [years[0], years[-1]], "rule": kinds[(i + k) % len(kinds)],
                      "note": "synthetic"} for k, nut in enumerate(F.NUTRIENTS)]
            docs.append({"country": country,
                         "surfaces": {country: {"years": years, "a_f": a_f, "a_a": a_a}},
                         "rules": rules})
        return docs

    def _budgets(self, rng):
        self.rule_docs = self._rules()
        data = {"surfaces": {d["country"]: grassland.Surfaces(**d["surfaces"][d["country"]])
                             for d in self.rule_docs}}
        shares = {}
        for d in self.rule_docs:
            for r in d["rules"]:
                rule = grassland.CountryRule(d["country"], r["nutrient"], tuple(r["span"]), r["rule"], d["country"])
                s = grassland.apply_country_rule(rule, data)
                for y in YEARS:
                    shares[(d["country"], r["nutrient"], y)] = s.at(y)
        rows = []
        area = self.area_of
        for country in self.countries:
            for y in YEARS:
                for nut in F.NUTRIENTS:
                    crop_t = sum(self.truth[(country, c, y, nut)] * area[(country, c, y)] for c in F.CROP_CLASSES) / 1e3
                    share = shares[(country, nut, y)]
                    total = crop_t / max(1.0 - share, 0.05) * rng.uniform(0.95, 1.05)
                    rows.append((country, y, nut, total))
        self.budgets = pd.DataFrame(rows, columns=["country", "year", "nutrient", "total_use"])

    def _reference(self, rng):
        rows = []
        for country in self.countries[:3]:
            for crop in ("Wheat", "Maize", "Vegetables"):
                for nut in F.NUTRIENTS:
                    for y in YEARS:
                        rows.append((country, crop, nut, y, self.truth[(country, crop, y, nut)] * rng.lognormal(0, 0.1)))
        self.reference = pd.DataFrame(rows, columns=["country", "crop", "nutrient", "year", "rate"])

    # -- writing -----------------------------------------------------------

    def write(self, root) -> Path:
        root = Path(root)
        (root / "rasters").mkdir(parents=True, exist_ok=True)
        F.write_table(self.rates, root / "rates.csv")
        F.write_table(self.features, root / "features.csv")
        F.write_table(self.budgets, root / "budgets.csv")
        F.write_table(self.fao_area, root / "areas.csv")
        F.write_table(self.reference, root / "reference.csv")
        with open(root / "rules.yaml", "w") as fh:
            yaml.safe_dump_all(self.rule_docs, fh, sort_keys=False)
        r = lambda a, unit="ha": geo.Raster(self.spec, a, unit)
        for crop, a in self.base.items():
            geo.write_raster(r(a), root / "rasters" / f"base_{crop}.tiff")
        for y in YEARS:
            geo.write_raster(r(self.nr[y]), root / "rasters" / f"cropland_nr_{y}.tiff")
            geo.write_raster(r(self.r[y]), root / "rasters" / f"cropland_r_{y}.tiff")
        for c, m in self.fracs.items():
            geo.write_raster(r(m, "fraction"), root / "rasters" / f"country_{c}.tiff")
        config = {
            "seed": self.seed,
            "years": list(YEARS),
            "base_year": BASE_YEAR,
            "paths": {"rates": "rates.csv", "features": "features.csv", "budgets": "budgets.csv",
                      "areas": "areas.csv", "rules": "rules.yaml", "rasters": "rasters",
                      "reference": "reference.csv"},
            "model": {"k_outer": 2, "k_inner": 5,
                      "grid": {"max_depth": [3, 6], "max_iter": [50, 150], "learning_rate": [0.1],
                               "min_samples_leaf": [5, 20]}},
            "output": "out",
        }
        with open(root / "config.yaml", "w") as fh:
            yaml.safe_dump(config, fh, sort_keys=False)
        return root / "config.yaml"


def regression_task(n_rows: int = 2000, n_features: int = 5, missing: float = 0.2, seed: int = 7):
    """Nonlinear regression benchmark with missing cells.

    A missing cell contributes a fixed amount of its own to the target, so the
    target stays a function of what is observed and a well-tuned model can
    reach a high R^2.  Returns ``(X, y)`` with NaN marking missing cells.
    """
    if n_features < 5:
        raise ValueError("the benchmark target uses five features")
    rng = np.random.default_rng(seed)
    X = rng.uniform(-2, 2, (n_rows, n_features))
    X[rng.random(X.shape) < missing] = np.nan
    parts = [np.sin(2 * X[:, 0]), 0.5 * X[:, 1] ** 2, np.where(X[:, 2] > 0.5, 1.5, -0.5),
             np.abs(X[:, 3]), 0.5 * X[:, 4]]
    fill = (0.8, -1.0, 2.0, -1.5, 1.2)
    y = sum(np.where(np.isnan(X[:, j]), fill[j], p) for j, p in enumerate(parts))
    y = y + np.nan_to_num(X[:, 0]) * np.nan_to_num(X[:, 1]) * 0.5
    return X, y + rng.normal(0, 0.1, n_rows)
