import dataclasses
import math

import numpy as np
import pytest

from conftest import feeder, small_system, two_bus
from tsodso.coord import (Strategy, actual_dn_response, clear_market, dn_context, evaluate_hour,
                          power_imbalance, redispatch, welfare_allocation)
from tsodso.demand import curve_for
from tsodso.experiment import build_history
from tsodso.grid import Generator
from tsodso.learn import History, curve_sse
from tsodso.opf import solve_distribution
from tsodso.scenario import relax_limits

BN, SB, PAG, PAW = (Strategy(t) for t in ("BN", "SB", "PAG", "PAW"))


@pytest.fixture(scope="module")
def trained():
    """Small system with history from the first 16 hours and 4 test hours after."""
    s = small_system(horizon=20, seed=3)
    return s, build_history(s, range(16)), range(16, 20)


def test_strategy_validation():
    with pytest.raises(ValueError):
        Strategy("XX")
    with pytest.raises(ValueError):
        Strategy("PAG", k=0)
    assert PAG.needs_history and not BN.needs_history


@pytest.mark.parametrize("f,a,expected", [(99.0, 100.0, 1.0), (100.0, 100.0, 0.0),
                                          (110.0, 100.0, 10.0), (5.0, -10.0, 150.0)])
def test_power_imbalance(f, a, expected):
    assert power_imbalance(f, a) == pytest.approx(expected)


def test_power_imbalance_undefined():
    assert math.isnan(power_imbalance(3.0, 0.0))


def test_benchmark_has_no_imbalance(system):
    for t in range(system.horizon):
        r = evaluate_hour(BN, system, t)
        assert r.delta_pct <= 1e-6
        assert r.sw_total == pytest.approx(r.clearing_welfare, rel=1e-6)
        assert r.sw_total == r.sw_d + r.sw_t
        assert r.slack_mw <= 1e-6
        for h in system.distribution:
            d = solve_distribution(system.distribution[h], t, r.prices[h], system)
            assert r.forecast[h] == pytest.approx(d.pn, abs=1e-4)


def test_benchmark_prices_reproduce_forecast(system):
    c = clear_market(BN, system, 1)
    resp, _ = actual_dn_response(system, 1, c.prices)
    assert sum(d.pn for d in resp.values()) == pytest.approx(sum(c.forecast.values()), abs=1e-4)


def test_price_cap_gives_minimum_demand():
    s = small_system(solar=0.0)
    resp, _ = actual_dn_response(s, 0, {h: s.lambda_hi for h in s.distribution})
    for h, d in resp.items():
        for c in s.distribution[h].consumers:
            assert d.pd[c.id] == pytest.approx(curve_for(c, 0, s.lambda_lo, s.lambda_hi).pmin,
                                               abs=1e-6)


def test_price_floor_gives_maximum_demand_when_unconstrained():
    s = small_system(solar=0.0, smax=500.0, r=0.001, x=0.001)
    resp, _ = actual_dn_response(s, 0, {h: s.lambda_lo for h in s.distribution})
    for h, d in resp.items():
        for c in s.distribution[h].consumers:
            assert d.pd[c.id] == pytest.approx(curve_for(c, 0, s.lambda_lo, s.lambda_hi).pmax,
                                               abs=1e-6)


def test_price_floor_limited_by_network():
    s = small_system(solar=0.0, smax=20.0)
    resp, _ = actual_dn_response(s, 0, {h: s.lambda_lo for h in s.distribution})
    for h, d in resp.items():
        dn = s.distribution[h]
        pmax = sum(curve_for(c, 0, s.lambda_lo, s.lambda_hi).pmax for c in dn.consumers)
        assert d.pn < pmax - 1e-3
        head = dn.lines[0]
        assert np.hypot(d.pf[head.id], d.qf[head.id]) == pytest.approx(20.0, rel=0.03)


def test_pag_constant_history(system):
    hist = {dn.id: History(dn.id, np.arange(5), np.random.default_rng(0).normal(size=(5, 3)),
                           np.linspace(5, 30, 5), np.full(5, 42.0)) for dn in system.dns()}
    c = clear_market(Strategy("PAG", k=3), system, 0, hist)
    assert c.forecast == pytest.approx({h: 42.0 for h in system.distribution})


def flat_price_system(price=12.0):
    """Two-bus grid with an unlimited flat-cost unit, so every LMP equals ``price``."""
    s = two_bus(load=30.0, dn=feeder("D1", "2", horizon=1))
    tg = s.transmission
    flat = (Generator("G1", "1", 0.0, price, 0.0, 1000.0),)
    return s.replace(transmission=dataclasses.replace(tg, generators=flat))


def test_paw_perfect_fit_round_trip():
    s = flat_price_system(12.0)
    dn = s.distribution["2"]
    prices = np.arange(8.0, 21.0)
    intakes = np.array([solve_distribution(dn, 0, p, s).pn for p in prices])
    assert np.all(np.diff(intakes) <= 1e-7)
    ctx = dn_context(s, "2", 0)
    hist = {"D1": History("D1", np.arange(prices.size), np.tile(ctx, (prices.size, 1)), prices,
                          intakes)}
    with pytest.warns(RuntimeWarning, match="zero-variance"):
        c = clear_market(Strategy("PAW", k=prices.size, blocks=prices.size), s, 0, hist)
    assert curve_sse(c.bids["2"], np.column_stack([prices, intakes])) <= 1e-12
    assert c.prices["2"] == pytest.approx(12.0, abs=1e-8)
    truth = solve_distribution(dn, 0, c.prices["2"], s).pn
    assert c.forecast["2"] == pytest.approx(truth, abs=1e-5)
    assert c.forecast["2"] == pytest.approx(c.bids["2"](12.0), abs=1e-6)


def test_missing_history_raises(system):
    with pytest.raises(ValueError, match="history"):
        clear_market(PAG, system, 0)
    with pytest.raises(ValueError, match="history"):
        clear_market(PAW, system, 0, {})


def test_redispatch_consistency(system):
    t = 2
    c = clear_market(BN, system, t)
    base = redispatch(system, t, c.forecast, c.prices)
    assert base.slack_mw <= 1e-6
    host = "2"
    bumped = dict(c.forecast)
    bumped[host] += 1.0
    moved = redispatch(system, t, bumped, c.prices)
    drop = base.dispatch.transmission_welfare - moved.dispatch.transmission_welfare
    # first order in LMP, second order bounded by the steepest marginal cost slope
    slope = max(g.a for g in system.transmission.generators)
    assert abs(drop - c.prices[host]) <= 0.5 * slope + 1e-6
    assert moved.sw_t == pytest.approx(moved.sw_t_free, abs=1e-6)


def test_large_imbalance_uses_slack(system):
    c = clear_market(BN, system, 0)
    huge = {h: v + 500.0 for h, v in c.forecast.items()}
    r = redispatch(system, 0, huge, c.prices)
    assert r.slack_mw > 100.0
    assert r.sw_t < r.sw_t_free


def test_benchmark_dominates(trained):
    s, hist, test = trained
    for t in test:
        bn = evaluate_hour(BN, s, t)
        for strat in (SB, Strategy("PAG", k=5), Strategy("PAW", k=8, blocks=3)):
            r = evaluate_hour(strat, s, t, hist)
            assert r.sw_total <= bn.sw_total + 1e-6 * abs(bn.sw_total), (strat.tag, t)
            assert r.delta_pct >= 0
            assert r.sw_total == r.sw_d + r.sw_t


def test_aggregated_matches_benchmark_without_limits():
    s = relax_limits(small_system(horizon=4, seed=5))
    for t in range(s.horizon):
        bn, sb = evaluate_hour(BN, s, t), evaluate_hour(SB, s, t)
        assert sb.delta_pct <= 1e-4
        assert sb.sw_total == pytest.approx(bn.sw_total, rel=1e-6)


def test_inflexible_feeders_pag_exact():
    s = small_system(horizon=10, seed=6, delta=0.0, smax=45.0)
    hist = build_history(s, range(10))
    assert all(len(h) == 10 for h in hist.values())
    for t in (2, 7):
        r = evaluate_hour(Strategy("PAG", k=1), s, t, hist)
        assert r.delta_pct <= 1e-4


def test_welfare_allocation(trained):
    s, hist, test = trained
    bn = [evaluate_hour(BN, s, t) for t in test]
    assert welfare_allocation(bn, bn) == (0.0, 0.0)
    sb = [evaluate_hour(SB, s, t) for t in test]
    tso, dso = welfare_allocation(sb, bn)
    loss = np.mean([100 * (b.sw_total - r.sw_total) / abs(b.sw_total) for r, b in zip(sb, bn)])
    assert tso + dso == pytest.approx(loss, abs=1e-9)
    with pytest.raises(ValueError):
        welfare_allocation(sb[:2], bn)


def test_flexibility_usage(system):
    r = evaluate_hour(BN, system, 0)
    baseline = sum(c.baseline[0] for dn in system.dns() for c in dn.consumers)
    assert r.flex_observed_pct == pytest.approx(100 * abs(r.actual_mw - baseline) / baseline)
    assert r.flex_forecast_pct == pytest.approx(100 * abs(r.forecast_mw - baseline) / baseline)


def test_context_vector(system):
    ctx = dn_context(system, "2", 1)
    dn = system.distribution["2"]
    assert ctx[0] == pytest.approx(sum(c.baseline[1] for c in dn.consumers))
    assert ctx[1] == pytest.approx(dn.generators[0].capacity_factor[1])
    assert ctx[2] == 0.0  # no wind units in this fixture
    assert list(dn_context(system, "2", 1, ("solar_cf",))) == [ctx[1]]


def test_pipeline_deterministic(trained):
    s, hist, test = trained
    t = test[0]
    a = evaluate_hour(Strategy("PAW", k=8, blocks=3), s, t, hist)
    b = evaluate_hour(Strategy("PAW", k=8, blocks=3), s, t, hist)
    assert (a.sw_total, a.delta_pct, a.forecast) == (b.sw_total, b.delta_pct, b.forecast)
