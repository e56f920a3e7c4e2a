import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fertgrid import geo
from fertgrid.geo import ARCMIN5, EARTH_RADIUS_M, GridSpec, Raster

from oracles import heap_dijkstra


def equator_grid(n_rows=3, n_cols=12, size=ARCMIN5):
    # row 0 straddles the equator, so its centre latitude is 0
    return GridSpec(n_rows, n_cols, size, west=0.0, north=size / 2)


# -- areas ---------------------------------------------------------------------

def test_equator_cell_area():
    spec = GridSpec(1, 1, ARCMIN5, west=0.0, north=ARCMIN5)
    d = math.radians(ARCMIN5)
    closed = EARTH_RADIUS_M ** 2 * d * math.sin(d) / 1e4
    assert geo.cell_area_ha(spec, 0) == pytest.approx(closed, rel=1e-12)
    assert geo.cell_area_ha(spec, 0) == pytest.approx(8571, rel=5e-3)


def test_polar_rows_smaller():
    spec = GridSpec()
    assert geo.cell_area_ha(spec, 0) < geo.cell_area_ha(spec, 1080)
    assert geo.cell_area_ha(spec, 2159) == pytest.approx(geo.cell_area_ha(spec, 0), rel=1e-9)


def test_global_area_sums_to_sphere():
    spec = GridSpec()
    total = geo.cell_area_ha(spec, np.arange(spec.n_rows)).sum() * spec.n_cols
    assert total == pytest.approx(4 * math.pi * EARTH_RADIUS_M ** 2 / 1e4, rel=1e-9)
    assert total == pytest.approx(5.10e10, rel=5e-3)


def test_area_grid_constant_along_rows():
    a = geo.area_grid(GridSpec(4, 5, 1.0, 0.0, 50.0))
    assert a.shape == (4, 5)
    assert (a == a[:, :1]).all()
    with pytest.raises(IndexError):
        geo.cell_area_ha(GridSpec(4, 5, 1.0, 0.0, 50.0), 4)


@pytest.mark.parametrize("kw", [dict(n_rows=0), dict(cell_size=0.0), dict(north=95.0),
                                dict(n_rows=2161)])
def test_bad_grids(kw):
    with pytest.raises(ValueError):
        GridSpec(**kw)


# -- environmental aggregation -------------------------------------------------

def test_aggregation_examples():
    one = {"X": np.ones(2)}
    assert geo.aggregate_environmental([7.0, 7.0], [2.0, 5.0], one) == {"X": 7.0}
    assert geo.aggregate_environmental([10.0, 30.0], [1.0, 3.0], one) == {"X": 25.0}
    assert math.isnan(geo.aggregate_environmental([10.0, 30.0], [0.0, 0.0], one)["X"])
    # nodata environment cells leave both sums
    assert geo.aggregate_environmental([np.nan, 30.0], [5.0, 3.0], one) == {"X": 30.0}


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_aggregation_within_range(seed):
    rng = np.random.default_rng(seed)
    env = rng.normal(size=(5, 5)) * 100
    area = rng.random((5, 5)) * (rng.random((5, 5)) < 0.6)
    frac = rng.random((5, 5))
    env0, area0 = env.copy(), area.copy()
    v = geo.aggregate_environmental(env, area, {"X": frac})["X"]
    used = env[(area * frac) > 0]
    if used.size:
        assert used.min() - 1e-9 <= v <= used.max() + 1e-9
    np.testing.assert_array_equal(env, env0)
    np.testing.assert_array_equal(area, area0)


def test_derive_climate():
    c = geo.derive_climate(np.full(12, 10.0), np.full(12, 20.0), np.full(12, 2.0))
    assert c["map"] == 120 and c["mat"] == pytest.approx(20.0) and c["pet"] == 730
    c = geo.derive_climate(np.full(12, 365 / 12), np.zeros(12), np.full(12, 2.0))
    assert c["aridity"] == pytest.approx(0.5)
    assert np.isnan(geo.derive_climate(np.ones((12, 1)), np.ones((12, 1)), np.zeros((12, 1)))["aridity"][0])


# -- cost distance -------------------------------------------------------------

def test_straight_line_closed_form():
    spec = equator_grid()
    f = np.full(spec.shape, 3.0)
    src = np.zeros(spec.shape, bool)
    src[0, 0] = True
    d = geo.cost_distance(f, src, spec)
    width = EARTH_RADIUS_M * math.radians(ARCMIN5)
    assert d[0, 0] == 0.0
    for k in range(1, spec.n_cols):
        assert abs(d[0, k] - k * 3.0 * width) <= 1e-9 * k * 3.0 * width


def test_matches_heap_oracle():
    rng = np.random.default_rng(0)
    spec = GridSpec(9, 11, 1.0, west=5.0, north=60.0)
    f = rng.uniform(0.5, 3.0, spec.shape)
    f[rng.random(spec.shape) < 0.1] = np.nan
    src = np.zeros(spec.shape, bool)
    src[4, 5] = src[0, 0] = True
    f[src] = 1.0
    lat, lon = spec.lat_centers(), spec.lon_centers()
    ref = heap_dijkstra(f, lambda r0, c0, r1, c1: geo.great_circle_m(lat[r0], lon[c0], lat[r1], lon[c1]), src)
    ref[~np.isfinite(ref)] = np.nan
    np.testing.assert_allclose(geo.cost_distance(f, src, spec), ref, rtol=1e-12, equal_nan=True)


def test_doubling_friction_doubles_cost():
    rng = np.random.default_rng(1)
    spec = GridSpec(6, 6, 1.0, 0.0, 10.0)
    f = rng.uniform(1, 2, spec.shape)
    src = np.zeros(spec.shape, bool)
    src[2, 3] = True
    np.testing.assert_allclose(geo.cost_distance(2 * f, src, spec), 2 * geo.cost_distance(f, src, spec),
                               rtol=1e-12)


def test_unreachable_and_errors():
    spec = GridSpec(3, 3, 1.0, 0.0, 10.0)
    f = np.ones(spec.shape)
    f[:, 1] = np.nan
    src = np.zeros(spec.shape, bool)
    src[0, 0] = True
    d = geo.cost_distance(f, src, spec)
    assert np.isnan(d[:, 1:]).all() and np.isfinite(d[:, 0]).all()
    with pytest.raises(ValueError):
        geo.cost_distance(f, np.zeros(spec.shape, bool), spec)
    with pytest.raises(ValueError):
        geo.cost_distance(-f, src, spec)


def _random_case(seed, shape=(6, 7)):
    rng = np.random.default_rng(seed)
    spec = GridSpec(*shape, 0.5, west=float(rng.uniform(-20, 20)), north=float(rng.uniform(-40, 60)))
    return rng, spec, rng.uniform(0.1, 5.0, spec.shape)


@pytest.mark.parametrize("seed", range(10))
def test_triangle_inequality(seed):
    rng, spec, f = _random_case(seed)
    cells = [tuple(int(v) for v in rng.integers(0, s, 3)) for s in spec.shape]
    a, b = list(zip(*cells))[:2]

    def single(cell):
        m = np.zeros(spec.shape, bool)
        m[cell] = True
        return geo.cost_distance(f, m, spec)

    da, db = single(a), single(b)
    assert np.all(da <= da[b] + db + 1e-9 * (da[b] + db))
    both = np.zeros(spec.shape, bool)
    both[a] = both[b] = True
    np.testing.assert_allclose(geo.cost_distance(f, both, spec), np.minimum(da, db), rtol=1e-12)


# -- raster files ----------------------------------------------------------------

def test_geotiff_round_trip(tmp_path):
    spec = GridSpec(4, 6, ARCMIN5, west=10.0, north=48.0)
    vals = np.arange(24, dtype=np.float64).reshape(4, 6) / 7
    vals[1, 2] = np.nan
    geo.write_raster(Raster(spec, vals, unit="kg", tags={"crop": "Wheat"}), tmp_path / "r.tiff")
    back = geo.read_raster(tmp_path / "r.tiff")
    assert back.spec == spec
    assert back.unit == "kg" and back.tags["crop"] == "Wheat"
    assert np.isnan(back.values[1, 2])
    np.testing.assert_array_equal(back.values, vals.astype(np.float32).astype(np.float64))


def test_raster_shape_checked():
    with pytest.raises(ValueError):
        Raster(GridSpec(2, 2, 1.0, 0.0, 10.0), np.zeros((3, 2)))
