"""Compare predicted rate series with national reference series."""
from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

NUTRIENT_COLUMNS = ("N", "P2O5", "K2O", "NPK")


def _as_series(s) -> dict[int, float]:
    if isinstance(s, pd.Series):
        s = s.to_dict()
    items = s.items() if isinstance(s, Mapping) else s
    out = {}
    for y, v in items:
        if v is None or (isinstance(v, float) and math.isnan(v)):
            continue
        out[int(y)] = float(v)
    return out


@dataclass(frozen=True)
class Agreement:
    mae: float
    mape: float  # NaN when every reference value is zero
    n: int
    n_mape: int


def mae_mape(pred, ref) -> Agreement:
    """MAE over shared years; MAPE relative to the reference, skipping zero references."""
    p, r = _as_series(pred), _as_series(ref)
    years = sorted(set(p) & set(r))
    if not years:
        raise ValueError("prediction and reference share no year")
    pv = np.array([p[y] for y in years])
    rv = np.array([r[y] for y in years])
    err = np.abs(pv - rv)
    pos = rv != 0
    if not pos.all():
        log.warning("mae_mape skipped %d zero-reference years in MAPE", int((~pos).sum()))
    mape = float(100 * np.mean(err[pos] / np.abs(rv[pos]))) if pos.any() else math.nan
    return Agreement(float(err.mean()), mape, len(years), int(pos.sum()))


def npk_sum_series(n, p, k) -> dict[int, float]:
    """Year-wise N + P2O5 + K2O; a year missing any part is dropped."""
    parts = [_as_series(s) for s in (n, p, k)]
    years = sorted(set(parts[0]) & set(parts[1]) & set(parts[2]))
    return {y: parts[0][y] + parts[1][y] + parts[2][y] for y in years}


@dataclass(frozen=True)
class ComparisonRow:
    country: str
    crop: str
    nutrient: str
    n_years: int
    mae: float
    mape: float

    def __post_init__(self):
        if self.n_years < 1:
            raise ValueError("a comparison needs at least one year")
        if self.mae < 0 or self.mape < 0:
            raise ValueError("errors are non-negative")


def comparison_rows(country: str, crop: str, pred: Mapping[str, object], ref: Mapping[str, object]):
    """Rows for every nutrient present in both ``pred`` and ``ref``."""
    rows = []
    for nut in NUTRIENT_COLUMNS:
        if nut in pred and nut in ref:
            a = mae_mape(pred[nut], ref[nut])
            rows.append(ComparisonRow(country, crop, nut, a.n, a.mae, a.mape))
    return rows


def emit_validation_table(rows: Sequence[ComparisonRow], sep: str = "\t") -> tuple[str, pd.DataFrame]:
    """Human table (one line per country and crop) plus a long machine-readable frame.

    Cells read "MAE / MAPE"; absent nutrients show NA.  The crop label carries
    the number of compared years in parentheses.
    """
    seen = {}
    for r in rows:
        key = (r.country, r.crop, r.nutrient)
        if key in seen:
            raise ValueError(f"duplicate comparison for {key}")
        seen[key] = r
    machine = pd.DataFrame([r.__dict__ for r in rows],
                           columns=["country", "crop", "nutrient", "n_years", "mae", "mape"])
    machine = machine.sort_values(["country", "crop", "nutrient"], kind="stable").reset_index(drop=True)
    out = io.StringIO()
    out.write(sep.join(["country", "crop", *(f"{n} MAE / MAPE" for n in NUTRIENT_COLUMNS)]) + "\n")
    for (country, crop), grp in machine.groupby(["country", "crop"], sort=True):
        n = int(grp["n_years"].max())
        cells = []
        for nut in NUTRIENT_COLUMNS:
            hit = grp[grp["nutrient"] == nut]
            if hit.empty:
                cells.append("NA")
            else:
                mape = hit["mape"].iloc[0]
                mape_s = "NA" if math.isnan(mape) else f"{mape:.2f}"
                cells.append(f"{hit['mae'].iloc[0]:.2f} / {mape_s}")
        out.write(sep.join([country, f"{crop} ({n})", *cells]) + "\n")
    return out.getvalue(), machine


def comparison_export(pred, ref) -> pd.DataFrame:
    """(year, pred, ref) over the union of years, for external plotting."""
    p, r = _as_series(pred), _as_series(ref)
    years = sorted(set(p) | set(r))
    return pd.DataFrame({"year": years, "pred": [p.get(y, np.nan) for y in years],
                         "ref": [r.get(y, np.nan) for y in years]})
