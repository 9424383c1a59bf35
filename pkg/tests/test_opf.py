import dataclasses
from types import SimpleNamespace

import numpy as np
import pytest

from conftest import feeder, single_consumer_dn, small_system, two_bus
from tsodso.demand import curve_for, demand_at_price
from tsodso.grid import Consumer, Line
from tsodso.learn import BidCurve, evaluate_curve
from tsodso.opf import (DnModel, build_transmission_clearing, consumer_welfare,
                        generation_cost, solve_distribution, solve_transmission)
from tsodso.scenario import relax_limits

FEAS = 1e-6


@pytest.mark.parametrize("price,pn", [(10.0, 15.0), (25.0, 5.0), (17.5, 10.0)])
def test_single_consumer_intake(price, pn):
    dn = single_consumer_dn()
    s = two_bus(dn=dn)
    d = solve_distribution(dn, 0, price, s)
    assert d.pn == pytest.approx(pn, abs=1e-6)
    assert d.qd["c1"] == pytest.approx(0.3 * pn, abs=1e-6)
    assert 0.9025 - FEAS <= d.v["n1"] <= 1.1025 + FEAS
    assert d.v["n0"] == 1.0


def test_free_solar_is_exported():
    dn = single_consumer_dn(solar=20.0)
    s = two_bus(dn=dn)
    for price in (0.5, 12.0, 30.0):
        d = solve_distribution(dn, 0, price, s)
        assert d.pn <= 1e-6
        assert d.pg["S1"] == pytest.approx(20.0, abs=1e-5)


def test_uncongested_two_bus_lmp():
    s = two_bus(load=50.0)
    r = solve_transmission(s, 0, {})
    assert r.pg["G1"] == pytest.approx(50.0, abs=1e-6)
    assert r.lmp["1"] == pytest.approx(11.0, abs=1e-6)
    assert r.lmp["2"] == pytest.approx(11.0, abs=1e-6)


def test_congested_two_bus_lmp():
    s = two_bus(load=50.0, smax=30.0, second_gen=True)
    r = solve_transmission(s, 0, {})
    assert r.pg["G1"] == pytest.approx(30.0, abs=1e-6)
    assert r.pg["G2"] == pytest.approx(20.0, abs=1e-6)
    assert r.pf["T12"] == pytest.approx(30.0, abs=1e-6)
    assert r.lmp["1"] == pytest.approx(10.6, abs=1e-6)
    assert r.lmp["2"] == pytest.approx(20.0, abs=1e-6)


def test_empty_market():
    s = two_bus(load=0.0, second_gen=True)
    r = solve_transmission(s, 0, {})
    assert all(abs(v) <= 1e-7 for v in r.pg.values())
    assert r.pf["T12"] == pytest.approx(0.0, abs=1e-7)
    assert r.welfare == pytest.approx(0.0, abs=1e-6)


def with_extra_load(system, bus, mw):
    tg = system.transmission
    extra = Consumer("extra", bus, np.full(system.horizon, mw), 0.0)
    return system.replace(transmission=dataclasses.replace(tg, consumers=tg.consumers + (extra,)))


def bn(system):
    return {h: DnModel.embedded() for h in system.distribution}


@pytest.mark.parametrize("bus", ["1", "2", "3"])
def test_lmp_matches_finite_difference(system, bus):
    eps = 1e-3
    for t in range(system.horizon):
        base = solve_transmission(system, t, bn(system))
        moved = solve_transmission(with_extra_load(system, bus, eps), t, bn(system))
        assert base.welfare - moved.welfare == pytest.approx(base.lmp[bus] * eps, rel=1e-3)


def test_substation_price_equals_host_lmp(system):
    r = solve_transmission(system, 0, bn(system))
    for host, d in r.dn_dispatch.items():
        assert d.price == r.lmp[host]


def test_embedded_welfare_splits_into_parts(system):
    for t in range(system.horizon):
        r = solve_transmission(system, t, bn(system))
        dn_w = sum(d.welfare for d in r.dn_dispatch.values())
        assert r.welfare == pytest.approx(r.transmission_welfare + dn_w, rel=1e-9, abs=1e-9)


def test_distribution_problem_reproduces_embedded_intake(system):
    for t in range(system.horizon):
        r = solve_transmission(system, t, bn(system))
        for host, dn in system.distribution.items():
            d = solve_distribution(dn, t, r.lmp[host], system)
            assert d.pn == pytest.approx(r.pn[host], abs=1e-4)


def check_distribution(dn, t, d, system):
    """Re-derive every constraint of the DN problem from the returned dispatch."""
    bal_p = {n: 0.0 for n in dn.nodes}
    bal_q = {n: 0.0 for n in dn.nodes}
    bal_p[dn.root] += d.pn
    bal_q[dn.root] += d.qn
    for g in dn.generators:
        p, q = d.pg[g.id], d.qg[g.id]
        assert g.pmin - FEAS <= p <= g.pmax_at(t) + FEAS
        assert g.qmin - FEAS <= q <= g.qmax + FEAS
        if g.sinv is not None:
            assert np.hypot(p, q) <= g.sinv + FEAS
        bal_p[g.bus] += p
        bal_q[g.bus] += q
    for c in dn.consumers:
        curve = curve_for(c, t, system.lambda_lo, system.lambda_hi)
        p = d.pd[c.id]
        assert curve.pmin - FEAS <= p <= curve.pmax + FEAS
        assert d.qd[c.id] == pytest.approx(c.gamma * p, abs=FEAS)
        bal_p[c.bus] -= p
        bal_q[c.bus] -= d.qd[c.id]
    for ln in dn.lines:
        p, q = d.pf[ln.id], d.qf[ln.id]
        assert np.hypot(p, q) <= ln.smax + FEAS
        bal_p[ln.from_bus] -= p
        bal_p[ln.to_bus] += p
        bal_q[ln.from_bus] -= q
        bal_q[ln.to_bus] += q
        # voltage drop along the stored orientation
        drop = 2 * (ln.r * p + ln.x * q) / system.base_mva
        assert d.v[ln.from_bus] - d.v[ln.to_bus] == pytest.approx(drop, abs=FEAS)
    assert max(abs(v) for v in bal_p.values()) <= FEAS
    assert max(abs(v) for v in bal_q.values()) <= FEAS
    assert d.v[dn.root] == pytest.approx(1.0, abs=1e-12)
    for n in dn.nodes:
        assert dn.vmin2[n] - FEAS <= d.v[n] <= dn.vmax2[n] + FEAS


def check_transmission(system, t, r):
    tg = system.transmission
    bal = {b: 0.0 for b in tg.buses}
    for g in tg.generators:
        assert g.pmin - FEAS <= r.pg[g.id] <= g.pmax_at(t) + FEAS
        bal[g.bus] += r.pg[g.id]
    for c in tg.consumers:
        bal[c.bus] -= r.pd[c.id]
    for ln in tg.lines:
        f = r.pf[ln.id]
        assert abs(f) <= ln.smax + FEAS
        assert f == pytest.approx(system.base_mva / ln.x * (r.theta[ln.from_bus] - r.theta[ln.to_bus]),
                                  abs=FEAS)
        bal[ln.from_bus] -= f
        bal[ln.to_bus] += f
    for host, pn in r.pn.items():
        bal[host] -= pn
    for b, s in r.slack.items():
        bal[b] += s
    assert max(abs(v) for v in bal.values()) <= FEAS
    assert abs(r.theta[tg.slack]) <= 1e-12


def test_dispatches_satisfy_constraints():
    s = small_system(horizon=6, seed=4)
    for t in range(s.horizon):
        r = solve_transmission(s, t, bn(s))
        check_transmission(s, t, r)
        for host, d in r.dn_dispatch.items():
            check_distribution(s.distribution[host], t, d, s)
        for host, dn in s.distribution.items():
            check_distribution(dn, t, solve_distribution(dn, t, 14.0, s), s)


def test_tight_feeder_constraints_hold():
    s = small_system(horizon=3, seed=1, smax=20.0, r=0.15, x=0.12, baseline=10.0)
    for t in range(s.horizon):
        r = solve_transmission(s, t, bn(s))
        check_transmission(s, t, r)
        for host, d in r.dn_dispatch.items():
            check_distribution(s.distribution[host], t, d, s)


def test_line_orientation_antisymmetry(system):
    tg = system.transmission
    flipped = tuple(Line(ln.id, ln.to_bus, ln.from_bus, ln.r, ln.x, ln.smax) if ln.id == "a" else ln
                    for ln in tg.lines)
    other = system.replace(transmission=dataclasses.replace(tg, lines=flipped))
    for t in range(system.horizon):
        a = solve_transmission(system, t, bn(system))
        b = solve_transmission(other, t, bn(other))
        assert b.pf["a"] == pytest.approx(-a.pf["a"], abs=1e-6)
        for k in ("b", "c"):
            assert b.pf[k] == pytest.approx(a.pf[k], abs=1e-6)
        for k in a.pg:
            assert b.pg[k] == pytest.approx(a.pg[k], abs=1e-6)
        assert b.welfare == pytest.approx(a.welfare, rel=1e-9)


def test_aggregated_equals_embedded_without_dn_limits():
    s = relax_limits(small_system(horizon=6, seed=2))
    for t in range(s.horizon):
        emb = solve_transmission(s, t, bn(s))
        agg = solve_transmission(s, t, {h: DnModel.aggregated() for h in s.distribution})
        assert agg.welfare == pytest.approx(emb.welfare, rel=1e-6)
        for h in s.distribution:
            assert agg.pn[h] == pytest.approx(emb.pn[h], abs=1e-4)


def test_fixed_intake_pins_pn(system):
    r = solve_transmission(system, 0, {"2": DnModel.fixed(7.5), "3": DnModel.fixed(-2.0)})
    assert r.pn == pytest.approx({"2": 7.5, "3": -2.0}, abs=1e-9)


def test_bid_clears_on_curve():
    dn = feeder("D1", "2")
    s = two_bus(load=40.0, dn=dn, second_gen=True, smax=30.0)
    curve = BidCurve(4.0, ((19.0, 8.0), (14.0, 12.0), (9.0, 20.0)))
    r = solve_transmission(s, 0, {"2": DnModel.bid(curve)})
    lmp = r.lmp["2"]
    # away from a breakpoint the cleared quantity is the curve value
    if min(abs(lmp - p) for p in curve.breakpoints) > 1e-6:
        assert r.pn["2"] == pytest.approx(evaluate_curve(curve, lmp), abs=1e-5)
    else:
        lo, hi = evaluate_curve(curve, lmp), evaluate_curve(curve, lmp - 1e-3)
        assert lo - 1e-6 <= r.pn["2"] <= hi + 1e-6


def test_clearing_errors(system):
    with pytest.raises(ValueError, match="no DN model"):
        build_transmission_clearing(system, 0, {"2": DnModel.embedded()})
    bad = SimpleNamespace(base=5.0, blocks=((20.0, 3.0),))
    with pytest.raises(ValueError, match="decrease"):
        build_transmission_clearing(system, 0, {"2": DnModel.bid(bad), "3": DnModel.embedded()})


def test_welfare_helpers():
    c = Consumer("c", "b", np.array([100.0]), 0.5)
    s = two_bus()
    assert consumer_welfare(c, 0, 100.0, s) == pytest.approx(1062.5)
    assert consumer_welfare(Consumer("c", "b", np.array([100.0]), 0.0), 0, 100.0, s) == 0.0
    assert generation_cost(s.transmission.generators[0], 50.0) == pytest.approx(0.01 * 2500 + 500)
    assert demand_at_price(curve_for(c, 0, 10, 25), 17.5) == pytest.approx(100.0)


def test_tight_feeder_binds_some_limit():
    # guard that the tight case really exercises voltage or line limits
    s = small_system(horizon=3, seed=1, smax=20.0, r=0.15, x=0.12, baseline=10.0)
    binding = False
    for t in range(s.horizon):
        r = solve_transmission(s, t, bn(s))
        for host, d in r.dn_dispatch.items():
            dn = s.distribution[host]
            binding |= any(d.v[n] <= dn.vmin2[n] + 1e-6 for n in dn.nodes)
    assert binding
