"""Grassland and fodder shares of national fertilizer use.

The intensity ratio R compares fertilizer per hectare on grassland and fodder
with fertilizer per hectare on all agricultural land.  Given R and the two
surfaces, the grassland share of a year is ``R * A_f / A_a``.  Country recipes
live in YAML rule files and combine a handful of primitives.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

log = logging.getLogger(__name__)

INTERP_R = "interp-R"
MEAN_R = "mean-R"
FIXED = "fixed"
BLENDED = "blended"
MIDPOINT_CAP = "midpoint-cap"


@dataclass(frozen=True)
class ShareObservation:
    country: str
    nutrient: str
    year: int
    q_f: float  # t to grassland and fodder
    q_a: float  # t to all agricultural land
    a_f: float  # ha of grassland and fodder
    a_a: float  # ha of agricultural land

    def __post_init__(self):
        if not 0 <= self.q_f <= self.q_a:
            raise ValueError("need 0 <= Q_f <= Q_a")
        if not 0 < self.a_f <= self.a_a:
            raise ValueError("need 0 < A_f <= A_a")

    @property
    def share(self) -> float:
        return self.q_f / self.q_a


@dataclass
class ShareSeries:
    country: str
    nutrient: str
    years: np.ndarray
    share: np.ndarray
    method: list[str]
    clamped: np.ndarray = None
    source: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.years = np.asarray(self.years, dtype=np.int64)
        self.share = np.asarray(self.share, dtype=np.float64)
        if self.clamped is None:
            self.clamped = np.zeros(self.years.shape, dtype=bool)
        if not self.source:
            self.source = [""] * len(self.years)
        if len(self.years) and (np.diff(self.years) != 1).any():
            raise ValueError("share series years must be contiguous")
        if ((self.share < 0) | (self.share > 1)).any():
            raise ValueError("shares must lie in [0, 1]")

    def at(self, year: int) -> float:
        i = int(year - self.years[0])
        if not 0 <= i < len(self.years):
            raise KeyError(year)
        return float(self.share[i])

    @property
    def n_clamped(self) -> int:
        return int(self.clamped.sum())

    def rows(self):
        for y, s, m, c in zip(self.years, self.share, self.method, self.clamped):
            yield (self.country, self.nutrient, int(y), float(s), m, bool(c))


@dataclass
class Surfaces:
    """Grassland+fodder area and agricultural area per year (ha)."""

    years: np.ndarray
    a_f: np.ndarray
    a_a: np.ndarray

    def __post_init__(self):
        self.years = np.asarray(self.years, dtype=np.int64)
        self.a_f = np.asarray(self.a_f, dtype=np.float64)
        self.a_a = np.asarray(self.a_a, dtype=np.float64)
        if not (self.years.shape == self.a_f.shape == self.a_a.shape):
            raise ValueError("surface arrays differ in length")
        if len(self.years) and (np.diff(self.years) != 1).any():
            raise ValueError("surface years must be contiguous")
        if ((self.a_a <= 0) | (self.a_f < 0)).any():
            raise ValueError("agricultural area must be positive and grassland area non-negative")

    @property
    def fraction(self) -> np.ndarray:
        return self.a_f / self.a_a

    def span(self, first: int, last: int) -> "Surfaces":
        if first < self.years[0] or last > self.years[-1]:
            raise ValueError(f"surfaces cover {self.years[0]}-{self.years[-1]}, asked for {first}-{last}")
        sl = slice(first - self.years[0], last - self.years[0] + 1)
        return Surfaces(self.years[sl], self.a_f[sl], self.a_a[sl])


def ratio_rfa(obs: ShareObservation) -> float:
    """Grassland+fodder intensity relative to all agricultural land."""
    if obs.q_a == 0 or obs.a_f == 0:
        raise ValueError("R undefined when Q_a or A_f is zero")
    return (obs.q_f * obs.a_a) / (obs.q_a * obs.a_f)


def _finish(country, nutrient, surfaces: Surfaces, r: np.ndarray, method: str) -> ShareSeries:
    raw = r * surfaces.fraction
    share = np.clip(raw, 0.0, 1.0)
    clamped = share != raw
    if clamped.any():
        log.warning("share clamped country=%s nutrient=%s years=%s", country, nutrient,
                    surfaces.years[clamped].tolist())
    return ShareSeries(country, nutrient, surfaces.years, share, [method] * len(share), clamped)


def share_from_mean_r(mean_r: float, surfaces: Surfaces, country: str = "", nutrient: str = "") -> ShareSeries:
    if mean_r < 0:
        raise ValueError("R must be non-negative")
    return _finish(country, nutrient, surfaces, np.full(len(surfaces.years), float(mean_r)), MEAN_R)


def interpolate_r(points: Sequence[tuple[int, float]], years) -> np.ndarray:
    """Piecewise-linear R through ``points``, flat beyond the first and last."""
    if not points:
        raise ValueError("need at least one R point")
    pts = sorted(points)
    xs = np.array([p[0] for p in pts], dtype=np.float64)
    if (np.diff(xs) == 0).any():
        raise ValueError("duplicate years among R points")
    ys = np.array([p[1] for p in pts], dtype=np.float64)
    return np.interp(np.asarray(years, dtype=np.float64), xs, ys)


def share_from_interp_r(points: Sequence[tuple[int, float]], surfaces: Surfaces,
                        country: str = "", nutrient: str = "") -> ShareSeries:
    return _finish(country, nutrient, surfaces, interpolate_r(points, surfaces.years), INTERP_R)


def evaluate_share_mae(series: ShareSeries, reported: Mapping[int, float] | Sequence[tuple[int, float]]):
    """Mean and sample sd of |estimate - report|, in percentage points."""
    pairs = dict(reported) if not isinstance(reported, Mapping) else reported
    errs = [abs(series.at(y) - s) * 100 for y, s in sorted(pairs.items())
            if series.years[0] <= y <= series.years[-1]]
    if not errs:
        raise ValueError("no reported year overlaps the series")
    errs = np.array(errs)
    sd = float(errs.std(ddof=1)) if errs.size > 1 else 0.0
    return float(errs.mean()), sd


# ---------------------------------------------------------------------------
# declarative country rules


class RuleError(ValueError):
    pass


def _fixed(value, surfaces):
    return np.full(len(surfaces.years), float(value)), FIXED


def _eval(node: Mapping, surfaces: Surfaces, data: Mapping, where: str):
    """Evaluate one rule node over ``surfaces``; returns (raw shares, method tag per year)."""
    if not isinstance(node, Mapping) or "method" not in node:
        raise RuleError(f"{where}: every rule node needs a 'method'")
    method = node["method"]
    n = len(surfaces.years)
    if method == "fixed":
        return np.full(n, float(node["value"])), [FIXED] * n
    if method == "mean_r":
        if "r" in node:
            r = float(node["r"])
        else:
            obs = _observations(node, data, where)
            r = float(np.mean([ratio_rfa(o) for o in obs]))
        return r * surfaces.fraction, [MEAN_R] * n
    if method == "interp_r":
        points = [(int(y), float(v)) for y, v in node.get("points", [])]
        if "observations" in node:
            points += [(o.year, ratio_rfa(o)) for o in _observations(node, data, where)]
        raw = interpolate_r(points, surfaces.years) * surfaces.fraction
        # anchors pin the share itself, not R
        for y, s in node.get("anchors", []):
            if surfaces.years[0] <= y <= surfaces.years[-1]:
                raw[int(y) - surfaces.years[0]] = float(s)
        return raw, [INTERP_R] * n
    if method == "blend":
        parts = node.get("of")
        if not parts or len(parts) != 2:
            raise RuleError(f"{where}: blend takes exactly two series")
        a, _ = _eval(parts[0], surfaces, data, where + ".of[0]")
        b, _ = _eval(parts[1], surfaces, data, where + ".of[1]")
        return 0.5 * (np.clip(a, 0, 1) + np.clip(b, 0, 1)), [BLENDED] * n
    if method == "midpoint_cap":
        # halfway between full allocation and the grassland fraction of the land
        inner, _ = _eval(node["of"], surfaces, data, where + ".of")
        cap = 0.5 * (1.0 + surfaces.fraction)
        return np.minimum(inner, cap), [MIDPOINT_CAP] * n
    if method == "piecewise":
        raw = np.full(n, np.nan)
        tags = [None] * n
        for k, piece in enumerate(node.get("pieces", [])):
            first, last = (int(v) for v in piece["span"])
            lo, hi = max(first, surfaces.years[0]), min(last, surfaces.years[-1])
            if lo > hi:
                continue
            sub = surfaces.span(lo, hi)
            vals, t = _eval(piece, sub, data, f"{where}.pieces[{k}]")
            sl = slice(lo - surfaces.years[0], hi - surfaces.years[0] + 1)
            raw[sl] = vals
            tags[sl] = t
        if np.isnan(raw).any():
            gaps = surfaces.years[np.isnan(raw)]
            raise RuleError(f"{where}: pieces leave years uncovered, e.g. {int(gaps[0])}")
        return raw, tags
    raise RuleError(f"{where}: unknown method {method!r}")


def _observations(node, data, where) -> list[ShareObservation]:
    key = node.get("observations")
    if key is None:
        raise RuleError(f"{where}: needs 'r' or 'observations'")
    obs = data.get("observations", {}).get(key)
    if obs is None:
        raise RuleError(f"{where}: missing observation series {key!r}")
    if not obs:
        raise RuleError(f"{where}: observation series {key!r} is empty")
    return obs


@dataclass
class CountryRule:
    country: str
    nutrient: str
    span: tuple[int, int]
    rule: dict
    surfaces: str  # key of the surface series the rule uses
    note: str = ""


def apply_country_rule(rule: CountryRule, data: Mapping) -> ShareSeries:
    """Evaluate a rule against ``data`` = {"surfaces": {...}, "observations": {...}}."""
    surf = data.get("surfaces", {}).get(rule.surfaces)
    if surf is None:
        raise RuleError(f"{rule.country}/{rule.nutrient}: missing surface series {rule.surfaces!r}")
    surf = surf.span(*rule.span)
    raw, tags = _eval(rule.rule, surf, data, f"{rule.country}/{rule.nutrient}")
    share = np.clip(raw, 0.0, 1.0)
    clamped = share != raw
    if clamped.any():
        log.warning("share clamped country=%s nutrient=%s n=%d", rule.country, rule.nutrient,
                    int(clamped.sum()))
    return ShareSeries(rule.country, rule.nutrient, surf.years, share, tags, clamped,
                       [rule.note] * len(tags))


def load_rules(path) -> tuple[list[CountryRule], dict]:
    """Read a YAML rule file (one document per country).

    Each document holds ``country``, optional ``surfaces`` / ``observations``
    data blocks, and ``rules``: a list of {nutrient, span, surfaces, rule, note}.
    """
    rules, data = [], {"surfaces": {}, "observations": {}}
    with open(path) as fh:
        docs = [d for d in yaml.safe_load_all(fh) if d]
    for doc in docs:
        country = str(doc["country"])
        for name, s in (doc.get("surfaces") or {}).items():
            data["surfaces"][name] = Surfaces(s["years"], s["a_f"], s["a_a"])
        for name, rows in (doc.get("observations") or {}).items():
            data["observations"][name] = [
                ShareObservation(country, r.get("nutrient", ""), int(r["year"]), float(r["q_f"]),
                                 float(r["q_a"]), float(r["a_f"]), float(r["a_a"])) for r in rows]
        for r in doc.get("rules", []):
            rules.append(CountryRule(country, str(r["nutrient"]), tuple(int(v) for v in r["span"]),
                                     r["rule"], str(r.get("surfaces", country)), str(r.get("note", ""))))
    return rules, data


def share_table(series: Sequence[ShareSeries]):
    import pandas as pd

    rows = [row for s in series for row in s.rows()]
    return pd.DataFrame(rows, columns=["country", "nutrient", "year", "share", "method", "clamped"])


def fixture_path(name: str) -> Path:
    return Path(__file__).with_name("data") / name


@dataclass
class ReconstructionCase:
    """Constant-R check for one country: R per nutrient plus, when available, the evidence."""

    country: str
    mean_r: dict[str, float]
    reference: dict[str, tuple[float, float]]  # nutrient -> (MAE, sd) in percentage points
    surfaces: Surfaces | None
    reported: dict[str, dict[int, float]] | None

    def missing_inputs(self) -> list[str]:
        return [name for name, v in (("surfaces", self.surfaces), ("reported_shares", self.reported))
                if v is None]

    def run(self, nutrient: str) -> tuple[float, float]:
        """MAE and sd (percentage points) of the constant-R series against the reports."""
        missing = self.missing_inputs()
        if missing:
            raise RuleError(f"{self.country}: reconstruction needs {', '.join(missing)}")
        series = share_from_mean_r(self.mean_r[nutrient], self.surfaces, self.country, nutrient)
        return evaluate_share_mae(series, self.reported[nutrient])


def load_reconstruction_case(path) -> ReconstructionCase:
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    nuts = doc["nutrients"]
    s = doc.get("surfaces")
    rep = doc.get("reported_shares")
    return ReconstructionCase(
        str(doc["country"]),
        {k: float(v["mean_r"]) for k, v in nuts.items()},
        {k: (float(v["reference_mae_pp"]), float(v["reference_sd_pp"])) for k, v in nuts.items()},
        Surfaces(s["years"], s["a_f"], s["a_a"]) if s else None,
        {k: {int(y): float(v) for y, v in d.items()} for k, d in rep.items()} if rep else None,
    )
