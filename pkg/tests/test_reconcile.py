import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from fertgrid.reconcile import CountryBudget, adjust_predictions, adjust_table, net_budget, scale_factor


def test_net_budget():
    assert net_budget(1000, 0) == 1000
    assert net_budget(1000, 1) == 0
    assert net_budget(1000, 0.25) == 750
    with pytest.raises(ValueError):
        net_budget(1000, 1.2)
    b = CountryBudget("AT", "N", 2000, 1000.0, 0.1)
    assert abs(b.net_budget - 900.0) <= 1e-12 * 900


def test_two_crop_example():
    rates, s = adjust_predictions([10, 20], [100, 100], 6)
    assert s == 2.0
    np.testing.assert_array_equal(rates, [20, 40])


def test_already_on_budget_unchanged():
    rates, s = adjust_predictions([10, 20], [100, 100], 3)
    assert s == 1.0
    np.testing.assert_array_equal(rates, [10, 20])


def test_zero_budget_and_nothing_to_scale():
    rates, s = adjust_predictions([10, 20], [100, 100], 0)
    assert s == 0 and (rates == 0).all()
    with pytest.raises(ValueError, match="nothing to scale"):
        adjust_predictions([0, 0], [100, 100], 5)
    with pytest.raises(ValueError):
        scale_factor([1, 2], [1], 5)


def test_accepts_country_budget():
    rates, _ = adjust_predictions([10, 20], [100, 100], CountryBudget("X", "N", 2000, 8.0, 0.25))
    np.testing.assert_allclose(rates, [20, 40])


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 13), st.integers(0, 2**31), st.floats(0.001, 1e7))
def test_conservation_order_idempotence(n, seed, budget):
    rng = np.random.default_rng(seed)
    rates = rng.uniform(0.01, 500, n)
    areas = rng.uniform(1, 1e6, n)
    adj, _ = adjust_predictions(rates, areas, budget)
    assert abs(adj @ areas - budget * 1000) <= 1e-9 * budget * 1000
    np.testing.assert_array_equal(np.argsort(adj, kind="stable"), np.argsort(rates, kind="stable"))
    again, s2 = adjust_predictions(adj, areas, budget)
    assert abs(s2 - 1) <= 1e-12
    np.testing.assert_allclose(again, adj, rtol=1e-12)


def test_adjust_table():
    pred = pd.DataFrame({"country": ["A", "A", "B"], "crop": ["Wheat", "Maize", "Wheat"],
                         "year": [2000] * 3, "nutrient": ["N"] * 3,
                         "rate": [10.0, 20.0, 5.0], "area": [100.0, 100.0, 400.0]})
    budgets = pd.DataFrame({"country": ["A", "B"], "year": [2000, 2000], "nutrient": ["N", "N"],
                            "total_use": [8.0, 4.0], "grass_share": [0.25, 0.5]})
    out = adjust_table(pred, budgets)
    assert list(out.columns) == ["country", "crop", "year", "nutrient", "area", "rate_raw",
                                 "rate_adjusted", "scale", "net_budget"]
    a = out[out.country == "A"].set_index("crop")
    assert a.loc["Wheat", "rate_adjusted"] == 20.0 and a.loc["Maize", "rate_adjusted"] == 40.0
    b = out[out.country == "B"].iloc[0]
    assert b["rate_adjusted"] == 5.0 and b["net_budget"] == 2.0
    with pytest.raises(KeyError):
        adjust_table(pred.assign(year=2001), budgets)
