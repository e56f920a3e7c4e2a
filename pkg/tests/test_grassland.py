import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fertgrid import grassland as G
from fertgrid.grassland import CountryRule, RuleError, ShareObservation, Surfaces


def surfaces(years, frac, a_a=1000.0):
    years = np.asarray(years)
    frac = np.broadcast_to(np.asarray(frac, dtype=float), years.shape)
    return Surfaces(years, frac * a_a, np.full(years.shape, a_a))


def obs(year, q_f, q_a, a_f, a_a):
    return ShareObservation("X", "N", year, q_f, q_a, a_f, a_a)


# -- the ratio and the two share routes ----------------------------------------------

def test_ratio_examples():
    assert G.ratio_rfa(obs(2000, 20, 100, 200, 1000)) == 1.0
    assert G.ratio_rfa(obs(2000, 10, 100, 200, 1000)) == 0.5
    assert G.ratio_rfa(obs(2000, 0, 100, 200, 1000)) == 0.0
    with pytest.raises(ValueError):
        G.ratio_rfa(obs(2000, 0, 0, 200, 1000))


@pytest.mark.parametrize("bad", [(5, 4, 1, 2), (-1, 4, 1, 2), (1, 4, 0, 2), (1, 4, 3, 2)])
def test_observation_invariants(bad):
    with pytest.raises(ValueError):
        obs(2000, *bad)


def test_equal_intensity_gives_area_fraction_exactly():
    s = Surfaces([2000, 2001, 2002], [123.0, 456.0, 789.0], [1000.0, 1111.0, 2345.0])
    series = G.share_from_mean_r(1.0, s)
    np.testing.assert_array_equal(series.share, s.a_f / s.a_a)


def test_mean_r_examples():
    assert (G.share_from_mean_r(0.0, surfaces([1, 2, 3], 0.4)).share == 0).all()
    np.testing.assert_allclose(G.share_from_mean_r(0.5, surfaces([1, 2], 0.4)).share, 0.2)
    with pytest.raises(ValueError):
        G.share_from_mean_r(-0.1, surfaces([1], 0.4))


def test_clamping_is_counted():
    series = G.share_from_mean_r(3.0, surfaces([1, 2, 3], [0.1, 0.5, 0.9]))
    np.testing.assert_allclose(series.share, [0.3, 1.0, 1.0])
    assert series.n_clamped == 2


def test_interpolation_examples():
    s = surfaces(np.arange(1960, 1981), 0.5)
    one = G.share_from_interp_r([(1970, 0.8)], s)
    np.testing.assert_array_equal(one.share, G.share_from_mean_r(0.8, s).share)
    two = G.share_from_interp_r([(1960, 0.0), (1980, 1.0)], s)
    assert two.at(1970) == 0.25
    assert two.method[0] == G.INTERP_R
    with pytest.raises(ValueError):
        G.interpolate_r([], [2000])


def test_interpolation_flat_beyond_points():
    r = G.interpolate_r([(1990, 0.2), (2000, 0.6)], [1980, 1990, 1995, 2000, 2010])
    np.testing.assert_allclose(r, [0.2, 0.2, 0.4, 0.6, 0.6])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0.01, 100), st.floats(0.01, 1.0), st.floats(0.01, 1.0)),
                min_size=1, max_size=6), st.integers(0, 2**31))
def test_knots_and_round_trip(parts, seed):
    # observations with 0 <= Q_f <= Q_a and 0 < A_f <= A_a at distinct years
    rng = np.random.default_rng(seed)
    years = np.sort(rng.choice(np.arange(1960, 2021), size=len(parts), replace=False))
    observations = []
    for y, (q_a, qs, fs) in zip(years, parts):
        observations.append(obs(int(y), q_a * qs, q_a, 1000.0 * fs, 1000.0))
    span = np.arange(1960, 2021)
    frac = rng.uniform(0.05, 1.0, span.size)
    for o in observations:
        frac[o.year - 1960] = o.a_f / o.a_a
    s = Surfaces(span, frac * 1000.0, np.full(span.size, 1000.0))
    series = G.share_from_interp_r([(o.year, G.ratio_rfa(o)) for o in observations], s)
    for o in observations:
        assert abs(series.at(o.year) - o.share) <= 1e-12
    assert ((series.share >= 0) & (series.share <= 1)).all()


def test_share_mae():
    s = G.share_from_mean_r(1.0, surfaces([2000, 2001], [0.2, 0.5]))
    assert G.evaluate_share_mae(s, {2000: 0.2, 2001: 0.5}) == (0.0, 0.0)
    mae, sd = G.evaluate_share_mae(s, {2000: 0.22, 2001: 0.46})
    assert mae == pytest.approx(3.0) and sd == pytest.approx(np.sqrt(2))
    with pytest.raises(ValueError):
        G.evaluate_share_mae(s, {1990: 0.1})


# -- rules -------------------------------------------------------------------------

def data_for(s, **obs_series):
    return {"surfaces": {"X": s}, "observations": obs_series}


def rule(body, span=(1960, 2020)):
    return CountryRule("X", "N", span, body, "X")


def test_fixed_rule():
    s = surfaces(np.arange(1960, 2021), 0.3)
    out = G.apply_country_rule(rule({"method": "fixed", "value": 0}), data_for(s))
    assert (out.share == 0).all() and len(out.years) == 61


def test_blend_rule():
    s = surfaces(np.arange(2000, 2005), 0.3)
    body = {"method": "blend", "of": [{"method": "fixed", "value": 0.2}, {"method": "fixed", "value": 0.4}]}
    out = G.apply_country_rule(rule(body, (2000, 2004)), data_for(s))
    np.testing.assert_allclose(out.share, 0.3)
    assert out.method == [G.BLENDED] * 5


def test_piecewise_tags_switch():
    s = surfaces(np.arange(1960, 2021), 0.4)
    o = [obs(1975, 10, 100, 200, 1000), obs(1985, 30, 100, 200, 1000)]
    body = {"method": "piecewise", "pieces": [
        {"span": [1960, 1989], "method": "interp_r", "observations": "hu", "anchors": [[1960, 0.0]]},
        {"span": [1990, 2020], "method": "mean_r", "observations": "hu"},
    ]}
    out = G.apply_country_rule(rule(body), data_for(s, hu=o))
    assert out.method[out.years.tolist().index(1989)] == G.INTERP_R
    assert out.method[out.years.tolist().index(1990)] == G.MEAN_R
    assert out.at(1960) == 0.0
    assert out.at(1975) == pytest.approx(0.5 * 0.4)  # R from the 1975 report
    assert out.at(2000) == pytest.approx(1.0 * 0.4)  # mean R = (0.5 + 1.5) / 2


def test_midpoint_cap():
    s = surfaces([2000], 0.4)
    body = {"method": "midpoint_cap", "of": {"method": "fixed", "value": 0.9}}
    assert G.apply_country_rule(rule(body, (2000, 2000)), data_for(s)).at(2000) == pytest.approx(0.7)


def test_missing_series_named():
    s = surfaces(np.arange(2000, 2003), 0.4)
    with pytest.raises(RuleError, match="'hu'"):
        G.apply_country_rule(rule({"method": "mean_r", "observations": "hu"}, (2000, 2002)), data_for(s))
    with pytest.raises(RuleError, match="'Y'"):
        G.apply_country_rule(CountryRule("X", "N", (2000, 2002), {"method": "fixed", "value": 0}, "Y"),
                             data_for(s))
    with pytest.raises(RuleError, match="uncovered"):
        G.apply_country_rule(rule({"method": "piecewise", "pieces": [
            {"span": [2000, 2000], "method": "fixed", "value": 0}]}, (2000, 2002)), data_for(s))
    with pytest.raises(RuleError, match="unknown method"):
        G.apply_country_rule(rule({"method": "magic"}, (2000, 2002)), data_for(s))


def test_load_rules_yaml(tmp_path):
    (tmp_path / "r.yaml").write_text("""\
country: HU
surfaces:
  HU: {years: [1989, 1990, 1991], a_f: [100, 100, 100], a_a: [400, 400, 400]}
observations:
  hu: [{year: 1990, q_f: 20, q_a: 100, a_f: 100, a_a: 400}]
rules:
  - {nutrient: N, span: [1989, 1991], rule: {method: mean_r, observations: hu}, note: reports}
---
country: BR
surfaces:
  BR: {years: [1990], a_f: [1], a_a: [2]}
rules:
  - {nutrient: K2O, span: [1990, 1990], rule: {method: fixed, value: 0}}
""")
    rules, data = G.load_rules(tmp_path / "r.yaml")
    assert [(r.country, r.nutrient) for r in rules] == [("HU", "N"), ("BR", "K2O")]
    series = [G.apply_country_rule(r, data) for r in rules]
    np.testing.assert_allclose(series[0].share, 0.2)
    table = G.share_table(series)
    assert list(table.columns) == ["country", "nutrient", "year", "share", "method", "clamped"]
    assert len(table) == 4


def test_austria_fixture_loads():
    case = G.load_reconstruction_case(G.fixture_path("austria.yaml"))
    assert case.mean_r == {"N": 0.33, "P2O5": 0.46, "K2O": 0.32}
    assert case.reference["N"] == (2.33, 3.09)


def test_reconstruction_case_runs_when_inputs_present():
    s = surfaces(np.arange(2000, 2004), [0.2, 0.25, 0.3, 0.35])
    reported = {2000: 0.07, 2002: 0.08}
    case = G.ReconstructionCase("X", {"N": 0.33}, {"N": (0, 0)}, s, {"N": reported})
    mae, _ = case.run("N")
    assert mae == pytest.approx((abs(0.066 - 0.07) + abs(0.099 - 0.08)) / 2 * 100)
    empty = G.ReconstructionCase("X", {"N": 0.33}, {"N": (0, 0)}, None, None)
    with pytest.raises(RuleError, match="surfaces"):
        empty.run("N")
