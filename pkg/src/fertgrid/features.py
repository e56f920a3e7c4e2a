"""Rate-record harmonization and predictor preparation.

Tables are pandas DataFrames in long form: one row per
(country, crop, year, nutrient) with a ``rate`` column in kg/ha.
"""
from __future__ import annotations

import logging
import re
import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .explain import FeatureGrouping
from .gbdt import BINARY, NUMERIC, FeatureMatrix

log = logging.getLogger(__name__)

CROP_CLASSES = (
    "Wheat", "Maize", "Rice", "OtherCereals", "Soybean", "PalmOilFruit", "OtherOilseeds",
    "Vegetables", "Fruits", "RootsAndTubers", "SugarCrops", "FiberCrops", "OtherCrops",
)
NUTRIENTS = ("N", "P2O5", "K2O")
RATE_CUTOFF = 5000.0  # kg/ha; larger values are treated as reporting errors
DOMINANT_SHARE = 0.9

# standard atomic masses, g/mol
ATOMIC_MASS = {"P": 30.9738, "K": 39.0983, "O": 15.999}
_OXIDE = {"P": ("P2O5", 2, 5), "K": ("K2O", 2, 1)}

KEY = ["country", "crop", "year", "nutrient"]


@dataclass(frozen=True)
class RateRecord:
    country: str
    crop: str
    year: int
    nutrient: str
    rate: float

    def __post_init__(self):
        if self.crop not in CROP_CLASSES:
            raise ValueError(f"unknown crop class {self.crop!r}")
        if self.nutrient not in NUTRIENTS:
            raise ValueError(f"unknown nutrient {self.nutrient!r}")
        if not self.rate >= 0:
            raise ValueError("rates are non-negative")


# ---------------------------------------------------------------------------
# unit arithmetic


def harmonize_rate(pct_fertilized: float, rate_on_fertilized: float) -> float:
    """Rate over the fertilized part -> average over the whole crop area."""
    if not (np.isfinite(pct_fertilized) and np.isfinite(rate_on_fertilized)):
        raise ValueError("inputs must be finite")
    if pct_fertilized < 0 or rate_on_fertilized < 0:
        raise ValueError("inputs must be non-negative")
    if pct_fertilized > 1:
        raise ValueError(f"fertilized fraction {pct_fertilized} exceeds 1")
    return float(pct_fertilized * rate_on_fertilized)


def rate_from_totals(total_use_t: float, harvested_area_ha: float) -> float:
    if not harvested_area_ha > 0:
        raise ValueError("no harvested area")
    return float(total_use_t) * 1000.0 / float(harvested_area_ha)


def weighted_group_rate(members) -> tuple[float, bool]:
    """Area-weighted rate of a crop group, and whether one member dominated.

    A member holding more than 90% of the area passes its own rate through.
    """
    rates = np.array([m[0] for m in members], dtype=np.float64)
    areas = np.array([m[1] for m in members], dtype=np.float64)
    if rates.size == 0:
        raise ValueError("empty crop group")
    if (areas < 0).any():
        raise ValueError("negative area")
    total = areas.sum()
    if not total > 0:
        raise ValueError("all member areas are zero")
    top = int(np.argmax(areas))
    if rates.size == 1 or areas[top] > DOMINANT_SHARE * total:
        return float(rates[top]), True
    return float(rates @ areas / total), False


def oxide_factor(element: str) -> float:
    if element not in _OXIDE:
        raise ValueError(f"no oxide form for element {element!r}")
    _, n_el, n_o = _OXIDE[element]
    el = n_el * ATOMIC_MASS[element]
    return (el + n_o * ATOMIC_MASS["O"]) / el


def oxide_conversion(element: str, amount):
    """Elemental P or K mass -> P2O5 or K2O mass."""
    amount = np.asarray(amount, dtype=np.float64)
    if (amount < 0).any():
        raise ValueError("amount must be non-negative")
    out = amount * oxide_factor(element)
    return float(out) if out.ndim == 0 else out


def deflate_prices(nominal, cpi):
    cpi = np.asarray(cpi, dtype=np.float64)
    if (cpi <= 0).any():
        raise ValueError("price index must be positive")
    out = np.asarray(nominal, dtype=np.float64) / cpi
    return float(out) if out.ndim == 0 else out


def season_start_year(label) -> int:
    """'1996/97' and '1996-1997' both map to 1996."""
    m = re.match(r"\s*(\d{4})", str(label))
    if m is None:
        raise ValueError(f"cannot read a year from {label!r}")
    return int(m.group(1))


# ---------------------------------------------------------------------------
# record filters


def filter_anomalies(records: pd.DataFrame, cutoff: float = RATE_CUTOFF) -> tuple[pd.DataFrame, int]:
    """Drop rates strictly above ``cutoff``; returns (kept, number removed)."""
    keep = ~(records["rate"] > cutoff)
    removed = int((~keep).sum())
    if removed:
        log.info("filter_anomalies removed=%d", removed)
    return records.loc[keep].reset_index(drop=True), removed


def select_labeled(records: pd.DataFrame) -> pd.DataFrame:
    """Keep (country, crop, year) groups that have a rate for every nutrient."""
    if records.empty:
        return records.copy()
    present = records.dropna(subset=["rate"])
    n = present.groupby(["country", "crop", "year"])["nutrient"].nunique()
    full = n[n == len(NUTRIENTS)].index
    idx = pd.MultiIndex.from_frame(present[["country", "crop", "year"]])
    return present.loc[idx.isin(full)].reset_index(drop=True)


def resolve_duplicates(records: pd.DataFrame) -> pd.DataFrame:
    """One row per key: the one with the latest ``source_date`` wins."""
    if "source_date" not in records:
        raise ValueError("duplicate resolution needs a source_date column")
    ordered = records.assign(_d=pd.to_datetime(records["source_date"]))
    ordered = ordered.sort_values("_d", kind="stable")
    return ordered.drop_duplicates(KEY, keep="last").drop(columns="_d").sort_values(KEY).reset_index(drop=True)


def iqr_filter(values, k: float = 1.5) -> np.ndarray:
    """Keep values inside [Q1 - k IQR, Q3 + k IQR]; quartiles by linear interpolation."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 4:
        warnings.warn("iqr_filter needs at least 4 values; passing through", stacklevel=2)
        return v.copy()
    q1, q3 = np.percentile(v, [25, 75], method="linear")
    lo, hi = q1 - k * (q3 - q1), q3 + k * (q3 - q1)
    return v[(v >= lo) & (v <= hi)]


# ---------------------------------------------------------------------------
# encoding


def one_hot_encode(table: pd.DataFrame, categorical) -> tuple[FeatureMatrix, FeatureGrouping]:
    """Numeric columns pass through; each categorical becomes sorted 0/1 columns.

    A missing category makes its whole family missing for that row.
    """
    categorical = list(categorical)
    columns, kinds, blocks, families = [], [], [], {}
    for name in table.columns:
        col = table[name]
        if name in categorical:
            levels = sorted(col.dropna().astype(str).unique())
            missing = col.isna().to_numpy()
            text = col.astype(str).to_numpy()
            fam = []
            for level in levels:
                block = (text == level).astype(np.float64)
                block[missing] = np.nan
                blocks.append(block)
                columns.append(f"{name}={level}")
                kinds.append(BINARY)
                fam.append(columns[-1])
            families[name] = fam
        else:
            blocks.append(pd.to_numeric(col, errors="raise").to_numpy(dtype=np.float64))
            columns.append(name)
            kinds.append(NUMERIC)
    values = np.column_stack(blocks) if blocks else np.empty((len(table), 0))
    matrix = FeatureMatrix(values, list(columns), list(kinds))
    return matrix, FeatureGrouping.from_columns(columns, families)


# ---------------------------------------------------------------------------
# feature registry


@dataclass(frozen=True)
class FeatureInfo:
    category: str  # environmental | agrological | socioeconomic | general
    unit: str
    nutrients: tuple[str, ...] = NUTRIENTS


def _reg():
    env, agr, soc, gen = "environmental", "agrological", "socioeconomic", "general"
    only = {"N": ("N",), "P2O5": ("P2O5",), "K2O": ("K2O",)}
    r = {
        "year": FeatureInfo(gen, ""),
        "crop": FeatureInfo(gen, ""),
        "country": FeatureInfo(gen, ""),
        "country_surface": FeatureInfo(gen, "km2"),
        "region": FeatureInfo(gen, ""),
        "pet": FeatureInfo(env, "mm/year"),
        "map": FeatureInfo(env, "mm/year"),
        "mat": FeatureInfo(env, "degC"),
        "aridity": FeatureInfo(env, ""),
        "soil_n": FeatureInfo(env, "cg/kg"),
        "soil_ocs": FeatureInfo(env, "t/ha"),
        "soil_sand": FeatureInfo(env, "g/kg"),
        "soil_silt": FeatureInfo(env, "g/kg"),
        "soil_clay": FeatureInfo(env, "g/kg"),
        "soil_ph": FeatureInfo(env, ""),
        "soil_cec": FeatureInfo(env, "mmol(c)/kg"),
        "crop_area": FeatureInfo(agr, "ha"),
        "crop_area_perc": FeatureInfo(agr, "%"),
        "holding_size": FeatureInfo(agr, "ha"),
        "irrigation": FeatureInfo(agr, "%"),
        "machinery": FeatureInfo(agr, "1/ha"),
        "global_crop_price": FeatureInfo(soc, "USD"),
        "education": FeatureInfo(soc, "%"),
        "gdp_per_capita": FeatureInfo(soc, "USD"),
        "population_pressure": FeatureInfo(soc, "persons/ha"),
        "national_crop_price": FeatureInfo(soc, "USD"),
    }
    for nut, el, price in (("N", "n", "global_urea_price"), ("P2O5", "p", "global_prock_price"),
                           ("K2O", "k", "global_k2o_price")):
        tag = nut.lower()
        r[f"country_{tag}_per_ha"] = FeatureInfo(agr, "t/ha", only[nut])
        r[f"country_{tag}_use"] = FeatureInfo(agr, "t", only[nut])
        r[f"crop_{el}_content"] = FeatureInfo(agr, "kg/t", only[nut])
        r[f"crop_{el}_removal"] = FeatureInfo(agr, "kg/ha", only[nut])
        r[price] = FeatureInfo(soc, "USD/t", only[nut])
        r[f"{el}_production_cost"] = FeatureInfo(soc, "", only[nut])
    return r


FEATURE_REGISTRY: dict[str, FeatureInfo] = _reg()
CATEGORICAL = ("crop", "country", "region")


def features_for(nutrient: str, available) -> list[str]:
    """Registered columns of ``available`` that feed the model for ``nutrient``."""
    if nutrient not in NUTRIENTS:
        raise ValueError(f"unknown nutrient {nutrient!r}")
    unknown = [c for c in available if c not in FEATURE_REGISTRY]
    if unknown:
        raise ValueError(f"unregistered feature columns: {unknown}")
    return [c for c in available if nutrient in FEATURE_REGISTRY[c].nutrients]


def categories(grouping: FeatureGrouping) -> dict[str, str]:
    return {g: FEATURE_REGISTRY[g].category for g in grouping.groups if g in FEATURE_REGISTRY}


# ---------------------------------------------------------------------------
# files


def read_table(path, sep: str | None = None) -> pd.DataFrame:
    """Delimited text with a header row; empty fields are missing."""
    if sep is None:
        sep = "\t" if str(path).endswith((".tsv", ".tab")) else ","
    return pd.read_csv(path, sep=sep, keep_default_na=False, na_values=[""])


def write_table(df: pd.DataFrame, path, sep: str = ",") -> None:
    # missing cells stay empty, never a numeric placeholder
    df.to_csv(path, sep=sep, index=False, na_rep="", float_format="%.17g", lineterminator="\n")
