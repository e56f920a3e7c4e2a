"""Scale predicted crop rates so each country's crop total meets its net budget."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd


@dataclass(frozen=True)
class CountryBudget:
    country: str
    nutrient: str
    year: int
    total_use: float  # t
    grass_share: float

    def __post_init__(self):
        if not 0.0 <= self.grass_share <= 1.0:
            raise ValueError(f"grassland share {self.grass_share} outside [0, 1]")
        if not self.total_use >= 0:
            raise ValueError("total use must be non-negative")

    @property
    def net_budget(self) -> float:
        return net_budget(self.total_use, self.grass_share)


def net_budget(total_use: float, grass_share: float) -> float:
    """Tonnes left for cropland once grassland and fodder take their share."""
    if not 0.0 <= grass_share <= 1.0:
        raise ValueError(f"grassland share {grass_share} outside [0, 1]")
    if not total_use >= 0:
        raise ValueError("total use must be non-negative")
    return float(total_use) * (1.0 - float(grass_share))


def scale_factor(pred_rates, areas, budget_t: float) -> float:
    rates = np.asarray(pred_rates, dtype=np.float64)
    areas = np.asarray(areas, dtype=np.float64)
    if rates.shape != areas.shape:
        raise ValueError("one area per predicted rate")
    if (rates < 0).any() or (areas < 0).any():
        raise ValueError("rates and areas must be non-negative")
    if budget_t == 0:
        return 0.0
    mass_kg = float(np.dot(rates, areas))
    if not mass_kg > 0:
        raise ValueError("nothing to scale: predicted crop mass is zero")
    return budget_t * 1000.0 / mass_kg


def adjust_predictions(pred_rates, areas, budget) -> tuple[np.ndarray, float]:
    """Multiply every rate by one factor so that sum(rate * area) hits the budget.

    ``budget`` is a CountryBudget or a net budget in tonnes.  Returns the
    adjusted rates and the factor.
    """
    budget_t = budget.net_budget if isinstance(budget, CountryBudget) else float(budget)
    if budget_t < 0:
        raise ValueError("budget must be non-negative")
    s = scale_factor(pred_rates, areas, budget_t)
    return np.asarray(pred_rates, dtype=np.float64) * s, s


def adjust_table(pred: pd.DataFrame, budgets: pd.DataFrame) -> pd.DataFrame:
    """Adjust a (country, crop, year, nutrient, rate, area) table.

    ``budgets`` holds (country, year, nutrient, total_use, grass_share).
    Output adds rate_raw, rate_adjusted and the scale per key.
    """
    key = ["country", "year", "nutrient"]
    merged = pred.merge(budgets, on=key, how="left", validate="many_to_one")
    if merged["total_use"].isna().any():
        miss = merged.loc[merged["total_use"].isna(), key].drop_duplicates().iloc[0].tolist()
        raise KeyError(f"no budget for {miss}")
    parts = []
    for k, g in merged.groupby(key, sort=True):
        nb = net_budget(float(g["total_use"].iloc[0]), float(g["grass_share"].iloc[0]))
        adj, s = adjust_predictions(g["rate"].to_numpy(), g["area"].to_numpy(), nb)
        parts.append(g.assign(rate_raw=g["rate"], rate_adjusted=adj, scale=s, net_budget=nb))
    out = pd.concat(parts, ignore_index=True)
    cols = ["country", "crop", "year", "nutrient", "area", "rate_raw", "rate_adjusted", "scale", "net_budget"]
    return out[cols].sort_values(["country", "crop", "year", "nutrient"]).reset_index(drop=True)
