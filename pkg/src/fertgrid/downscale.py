"""Gridded harvested areas per crop and year, national alignment with capping,
and fertilizer-mass rasters.

Arrays are (n_rows, n_cols) float64 in hectares unless stated otherwise;
``country_fracs`` maps a country code to the fraction of each cell it owns.
"""
from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

RINGS = (5, 10, 25, 50, 100, 150, 200, 250)
MAX_ROUNDS = 100
TOLERANCE = 1e-6
FRACTION_SLACK = 1e-9


class InfeasibleError(ValueError):
    """National total cannot fit into the feasible cell area."""


# ---------------------------------------------------------------------------
# neighbourhood ratios


def _ratio(base_map, carea_2000):
    base = np.asarray(base_map, dtype=np.float64)
    den = np.asarray(carea_2000, dtype=np.float64)
    valid = den > 0
    r = np.zeros_like(base)
    np.divide(base, den, out=r, where=valid)
    return r, valid


def neighbor_ratio(base_map, carea_2000, cell: tuple[int, int], rings: Sequence[int] = RINGS) -> float:
    """Crop-to-cropland ratio around ``cell``, widening the window until it is nonzero.

    Ring ``k`` is the (2k+1)^2 square centred on the cell, clipped at the grid
    edge.  Only cells with cropland in the base year take part.  Falls back to 1.
    """
    r, valid = _ratio(base_map, carea_2000)
    i, j = cell
    if not (0 <= i < r.shape[0] and 0 <= j < r.shape[1]):
        raise IndexError("cell out of range")
    for k in sorted(rings):
        win = (slice(max(i - k, 0), i + k + 1), slice(max(j - k, 0), j + k + 1))
        n = valid[win].sum()
        if n:
            mean = r[win][valid[win]].sum() / n
            if mean != 0:
                return float(mean)
    return 1.0


def _box_sum(integral, k):
    # window sums of half-width k for every cell, from a zero-padded integral image
    n_rows, n_cols = integral.shape[0] - 1, integral.shape[1] - 1
    r = np.arange(n_rows)
    c = np.arange(n_cols)
    r0, r1 = np.clip(r - k, 0, n_rows), np.clip(r + k + 1, 0, n_rows)
    c0, c1 = np.clip(c - k, 0, n_cols), np.clip(c + k + 1, 0, n_cols)
    return (integral[r1][:, c1] - integral[r0][:, c1] - integral[r1][:, c0] + integral[r0][:, c0])


def neighbor_ratios(base_map, carea_2000, rings: Sequence[int] = RINGS) -> np.ndarray:
    """``neighbor_ratio`` for every cell at once."""
    r, valid = _ratio(base_map, carea_2000)
    pad = lambda a: np.pad(np.cumsum(np.cumsum(a, 0), 1), ((1, 0), (1, 0)))
    # ratios are non-negative, so a window mean is nonzero iff the window holds a
    # positive ratio; that test uses exact integer counts, since summed-area
    # differences can leave rounding residue where the true sum is zero
    ir, iv, ip = pad(r), pad(valid.astype(np.float64)), pad((r > 0).astype(np.float64))
    out = np.ones(r.shape)
    pending = np.ones(r.shape, dtype=bool)
    for k in sorted(rings):
        s, n, npos = _box_sum(ir, k), _box_sum(iv, k), _box_sum(ip, k)
        mean = np.zeros_like(s)
        np.divide(s, n, out=mean, where=n > 0)
        hit = pending & (npos > 0)
        out[hit] = mean[hit]
        pending &= ~hit
        if not pending.any():
            break
    return out


# ---------------------------------------------------------------------------
# yearly maps


def build_harea_year(base_map, all_crops_2000, carea_nr_2000, carea_r_year, carea_nr_year,
                     is_rice: bool, cell_area=None, ratios=None) -> np.ndarray:
    """Harvested area of one crop in one year before national alignment.

    Rice copies the yearly rice cropland.  Other crops scale the yearly
    non-rice cropland by their base-year share of it; cells without base-year
    crops (or base-year cropland) borrow the share of their neighbourhood.
    The result is truncated at ``cell_area``.
    """
    layers = [base_map, all_crops_2000, carea_nr_2000, carea_r_year, carea_nr_year]
    if any(a is None for a in layers):
        raise ValueError("missing input layer")
    base, crops0, nr0, r_y, nr_y = (np.asarray(a, dtype=np.float64) for a in layers)
    if len({a.shape for a in (base, crops0, nr0, r_y, nr_y)}) != 1:
        raise ValueError("input layers differ in shape")
    if is_rice:
        out = r_y.copy()
    else:
        old = (crops0 > 0) & (nr0 > 0)
        out = np.zeros_like(base)
        np.divide(nr_y * base, nr0, out=out, where=old)
        new = ~old & (nr_y > 0)
        if new.any():
            if ratios is None:
                ratios = neighbor_ratios(base, nr0)
            out[new] = nr_y[new] * ratios[new]
    if cell_area is not None:
        out = np.minimum(out, cell_area)
    return out


def cap_layers(layers: np.ndarray, cell_area) -> np.ndarray:
    """Shrink all crop layers of a cell by one factor where their sum exceeds the cell."""
    layers = np.asarray(layers, dtype=np.float64)
    total = layers.sum(axis=0)
    f = np.ones_like(total)
    over = total > cell_area
    f[over] = np.asarray(np.broadcast_to(cell_area, total.shape))[over] / total[over]
    return layers * f


# ---------------------------------------------------------------------------
# national alignment


def align_joint(layers, totals, capacity, max_rounds: int = MAX_ROUNDS, tol: float = TOLERANCE):
    """Scale each crop layer to its national total, then cap and redistribute.

    ``layers`` is (n_crops, n_cells) for one country, ``capacity`` the
    feasible area per cell shared by all crops.  Where a cell overflows, its
    crops shrink by a common factor and each crop's excess moves to its other
    cells in proportion to their current area.  Returns (layers, rounds).
    """
    P = np.array(layers, dtype=np.float64, copy=True)
    totals = np.asarray(totals, dtype=np.float64)
    cap = np.asarray(capacity, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] != totals.shape[0] or P.shape[1] != cap.shape[0]:
        raise ValueError("layers, totals and capacity do not line up")
    if (totals < 0).any():
        raise ValueError("national totals must be non-negative")
    sums = P.sum(axis=1)
    for c in range(P.shape[0]):
        if totals[c] == 0:
            P[c] = 0.0
        elif not sums[c] > 0:
            raise InfeasibleError(f"crop {c}: national total {totals[c]} but no gridded area to scale")
        else:
            P[c] *= totals[c] / sums[c]
    for c in np.flatnonzero(totals > 0):
        room = cap[P[c] > 0].sum()
        if totals[c] > room * (1 + 1e-12):
            raise InfeasibleError(f"infeasible national total: {totals[c]:.6g} ha > {room:.6g} ha feasible")
    if totals.sum() > cap[(P > 0).any(axis=0)].sum() * (1 + 1e-12):
        raise InfeasibleError("infeasible national total: crops together exceed the feasible area")
    rounds = 0
    while rounds < max_rounds:
        S = P.sum(axis=0)
        over = S > cap
        if not over.any():
            break
        rounds += 1
        f = cap[over] / S[over]
        excess = (P[:, over] * (1.0 - f)).sum(axis=1)
        P[:, over] *= f
        open_ = P.sum(axis=0) < cap
        open_[over] = False
        for c in np.flatnonzero(excess > 0):
            rec = open_ & (P[c] > 0)
            if not rec.any():
                # every cell of this crop is full: push the excess back onto them, so
                # the next round's common shrink moves the other crops out instead
                rec = P[c] > 0
            w = P[c, rec].sum()
            P[c, rec] += excess[c] * P[c, rec] / w
    S = P.sum(axis=0)
    over = S > cap
    if over.any():
        # leftovers after the last round are truncated; the deficit is checked below
        P[:, over] *= cap[over] / S[over]
    got = P.sum(axis=1)
    bad = np.abs(got - totals) > tol * totals
    if bad.any():
        c = int(np.flatnonzero(bad)[0])
        raise InfeasibleError(f"infeasible national total: crop {c} ends at {got[c]:.6g} of {totals[c]:.6g} ha")
    return P, rounds


def align_to_national(harea, national_total: float, feasible, mask=None, **kw) -> np.ndarray:
    """One crop, one country: scale in-country cells to ``national_total``, cap and redistribute."""
    harea = np.asarray(harea, dtype=np.float64)
    feasible = np.broadcast_to(np.asarray(feasible, dtype=np.float64), harea.shape)
    mask = np.ones(harea.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if national_total < 0:
        raise ValueError("national total must be non-negative")
    out = harea.copy()
    P, _ = align_joint(harea[mask][None, :], [national_total], feasible[mask], **kw)
    out[mask] = P[0]
    return out


def fertilizer_raster(harea, rates: Mapping[str, float], country_fracs: Mapping[str, np.ndarray]) -> np.ndarray:
    """Fertilizer mass (kg) per cell: area times the country-weighted rate."""
    harea = np.asarray(harea, dtype=np.float64)
    total_frac = np.zeros_like(harea)
    rate = np.zeros_like(harea)
    for country, frac in country_fracs.items():
        frac = np.asarray(frac, dtype=np.float64)
        total_frac += frac
        rate += rates.get(country, 0.0) * frac
    if (total_frac > 1 + FRACTION_SLACK).any():
        raise ValueError("country fractions sum above 1 in some cells")
    return harea * rate


# ---------------------------------------------------------------------------
# outputs


def layer_name(crop: str, nutrient: str, year: int) -> str:
    return f"{crop}{nutrient}{year}.tiff"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(paths: Sequence[Path], out_path) -> dict:
    entries = {Path(p).name: sha256_file(p) for p in sorted(paths, key=lambda p: Path(p).name)}
    Path(out_path).write_text(json.dumps({"layers": entries}, indent=1, sort_keys=True) + "\n")
    return entries
