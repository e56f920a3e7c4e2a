"""Regular lat/lon grids: cell areas, GeoTIFF I/O, environmental aggregation,
climate indices and accumulated-cost surfaces."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

EARTH_RADIUS_M = 6_371_000.0
ARCMIN5 = 5.0 / 60.0
DAYS_IN_MONTH = np.array([31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31], dtype=np.float64)
NODATA = -9999.0  # on-disk marker; NaN in memory


@dataclass(frozen=True)
class GridSpec:
    n_rows: int = 2160
    n_cols: int = 4320
    cell_size: float = ARCMIN5  # degrees
    west: float = -180.0
    north: float = 90.0
    datum: str = "WGS84"

    def __post_init__(self):
        if self.n_rows < 1 or self.n_cols < 1:
            raise ValueError("grid needs at least one cell")
        if not self.cell_size > 0:
            raise ValueError("cell size must be positive")
        tol = 1e-9
        if self.n_rows * self.cell_size > 180 + tol or self.n_cols * self.cell_size > 360 + tol:
            raise ValueError("grid larger than the globe")
        if self.north > 90 + tol or self.north - self.n_rows * self.cell_size < -90 - tol:
            raise ValueError("grid extends past a pole")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    def lat_edges(self) -> np.ndarray:
        """Northern edge of each row followed by the southern edge of the last."""
        return self.north - self.cell_size * np.arange(self.n_rows + 1)

    def lat_centers(self) -> np.ndarray:
        return self.north - self.cell_size * (np.arange(self.n_rows) + 0.5)

    def lon_centers(self) -> np.ndarray:
        return self.west + self.cell_size * (np.arange(self.n_cols) + 0.5)


@dataclass
class Raster:
    spec: GridSpec
    values: np.ndarray  # (n_rows, n_cols); NaN is nodata
    unit: str = ""
    tags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.spec.shape:
            raise ValueError(f"values {self.values.shape} do not fit grid {self.spec.shape}")


# ---------------------------------------------------------------------------
# areas and distances


def cell_area_ha(spec: GridSpec, row) -> np.ndarray | float:
    """Area of a cell in ``row`` on a sphere; same for every column of the row."""
    row = np.asarray(row)
    if ((row < 0) | (row >= spec.n_rows)).any():
        raise IndexError("row out of range")
    top = np.radians(spec.north - spec.cell_size * row)
    bottom = np.radians(spec.north - spec.cell_size * (row + 1))
    area_m2 = EARTH_RADIUS_M ** 2 * math.radians(spec.cell_size) * (np.sin(top) - np.sin(bottom))
    out = area_m2 / 1e4
    return float(out) if out.ndim == 0 else out


def area_grid(spec: GridSpec) -> np.ndarray:
    """Cell areas in ha, broadcast to the full grid."""
    per_row = cell_area_ha(spec, np.arange(spec.n_rows))
    return np.repeat(per_row[:, None], spec.n_cols, axis=1)


def great_circle_m(lat0, lon0, lat1, lon1):
    """Haversine distance in metres; angles in degrees."""
    p0, p1 = np.radians(lat0), np.radians(lat1)
    dp = p1 - p0
    dl = np.radians(np.asarray(lon1) - np.asarray(lon0))
    h = np.sin(dp / 2) ** 2 + np.cos(p0) * np.cos(p1) * np.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.minimum(h, 1.0)))


# ---------------------------------------------------------------------------
# environmental aggregation


def aggregate_environmental(env, crop_area, country_fracs: Mapping[str, np.ndarray]) -> dict[str, float]:
    """Crop-area-weighted mean of ``env`` per country (NaN where the crop is absent).

    Cells count where the crop grows (area > 0) and ``env`` is defined; a
    fractional country mask scales each cell's weight.
    """
    env = np.asarray(env, dtype=np.float64)
    area = np.asarray(crop_area, dtype=np.float64)
    if env.shape != area.shape:
        raise ValueError("environment and crop rasters differ in shape")
    ok = np.isfinite(env) & (area > 0)
    envz = np.where(ok, env, 0.0)
    out = {}
    for country, frac in country_fracs.items():
        frac = np.asarray(frac, dtype=np.float64)
        if frac.shape != env.shape:
            raise ValueError(f"country mask {country!r} differs in shape")
        w = np.where(ok, area * frac, 0.0)
        total = w.sum()
        out[country] = float((w * envz).sum() / total) if total > 0 else math.nan
    return out


def derive_climate(precip, temp, pet_daily) -> dict[str, np.ndarray]:
    """Annual precipitation, mean temperature, PET and aridity from 12 monthly layers.

    ``precip`` is mm per month, ``temp`` degC and ``pet_daily`` mm/day.
    Months are weighted by their length in a non-leap year.
    """
    layers = [np.asarray(a, dtype=np.float64) for a in (precip, temp, pet_daily)]
    for a in layers:
        if a.shape[0] != 12:
            raise ValueError("expected 12 monthly layers")
    precip, temp, pet_daily = layers
    days = DAYS_IN_MONTH.reshape((12,) + (1,) * (precip.ndim - 1))
    map_ = precip.sum(axis=0)
    mat = (temp * days).sum(axis=0) / DAYS_IN_MONTH.sum()
    pet = (pet_daily * days).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        aridity = np.where(pet > 0, map_ / np.where(pet > 0, pet, 1.0), np.nan)
    return {"map": map_, "mat": mat, "pet": pet, "aridity": aridity}


# ---------------------------------------------------------------------------
# accumulated cost


_STEPS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def cost_graph(friction, spec: GridSpec) -> sparse.csr_matrix:
    """8-connected graph; a step costs mean friction times centre-to-centre distance."""
    f = np.asarray(friction, dtype=np.float64)
    if f.shape != spec.shape:
        raise ValueError("friction grid does not match the grid")
    if (f[np.isfinite(f)] <= 0).any():
        raise ValueError("friction must be positive on traversable cells")
    n_rows, n_cols = f.shape
    lat = spec.lat_centers()
    lon = spec.lon_centers()
    ids = np.arange(f.size).reshape(f.shape)
    src, dst, w = [], [], []
    for dr, dc in _STEPS:
        r0 = slice(max(0, -dr), n_rows - max(0, dr))
        c0 = slice(max(0, -dc), n_cols - max(0, dc))
        r1 = slice(max(0, dr), n_rows - max(0, -dr))
        c1 = slice(max(0, dc), n_cols - max(0, -dc))
        a, b = f[r0, c0], f[r1, c1]
        ok = np.isfinite(a) & np.isfinite(b)
        rows = np.arange(n_rows)[r0]
        d = great_circle_m(lat[rows][:, None], lon[c0][None, :], lat[rows + dr][:, None],
                           lon[c0][None, :] + dc * spec.cell_size)
        d = np.broadcast_to(d, a.shape)
        src.append(ids[r0, c0][ok])
        dst.append(ids[r1, c1][ok])
        w.append((0.5 * (a + b) * d)[ok])
    src, dst, w = map(np.concatenate, (src, dst, w))
    return sparse.csr_matrix((w, (src, dst)), shape=(f.size, f.size))


def cost_distance(friction, sources, spec: GridSpec) -> np.ndarray:
    """Least accumulated cost from the nearest source; NaN where unreachable."""
    src = np.asarray(sources, dtype=bool)
    if src.shape != spec.shape:
        raise ValueError("source mask does not match the grid")
    if not src.any():
        raise ValueError("cost distance needs at least one source cell")
    f = np.asarray(friction, dtype=np.float64)
    if not np.isfinite(f[src]).all():
        raise ValueError("source cells must be traversable")
    graph = cost_graph(f, spec)
    dist = csgraph.dijkstra(graph, directed=True, indices=np.flatnonzero(src), min_only=True)
    dist = dist.reshape(spec.shape)
    dist[~np.isfinite(dist)] = np.nan
    return dist


# ---------------------------------------------------------------------------
# GeoTIFF


def write_raster(raster: Raster, path) -> None:
    import rasterio
    from rasterio.transform import Affine

    s = raster.spec
    data = np.where(np.isnan(raster.values), NODATA, raster.values).astype(np.float32)
    profile = dict(driver="GTiff", height=s.n_rows, width=s.n_cols, count=1, dtype="float32",
                   crs="EPSG:4326", nodata=NODATA, compress="deflate",
                   transform=Affine(s.cell_size, 0.0, s.west, 0.0, -s.cell_size, s.north))
    with rasterio.open(path, "w", **profile) as dst:
        dst.write(data, 1)
        tags = {"unit": raster.unit, **{k: str(v) for k, v in raster.tags.items()}}
        dst.update_tags(**tags)


def read_raster(path) -> Raster:
    import rasterio

    with rasterio.open(path) as src:
        t = src.transform
        if not math.isclose(t.a, -t.e, rel_tol=1e-12):
            raise ValueError(f"{path}: cells are not square")
        spec = GridSpec(src.height, src.width, t.a, t.c, t.f)
        data = src.read(1).astype(np.float64)
        if src.nodata is not None:
            data[data == src.nodata] = np.nan
        tags = src.tags()
    unit = tags.pop("unit", "")
    tags.pop("AREA_OR_POINT", None)
    return Raster(spec, data, unit, tags)
