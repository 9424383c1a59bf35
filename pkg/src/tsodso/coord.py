"""TSO-DSO coordination strategies and their hourly evaluation.

Four ways to represent distribution networks when clearing the transmission
market:

``BN``  full network model of every feeder (benchmark)
``SB``  feeders collapsed onto their substation bus, no network limits
``PAG`` fixed intake forecast from nearest-neighbour contexts
``PAW`` learned step-wise price response submitted as a block bid

Evaluation of one hour: clear the market, let every feeder respond optimally
to its substation price, measure the intake imbalance, re-dispatch the
transmission system with the realized intakes, and add up welfare.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .grid import PowerSystem
from .learn import knn_forecast, learn_bid
from .opf import (DEFAULT_OPTIONS, DnModel, OpfOptions, SolverError, solve_distribution,
                  solve_transmission)

TAGS = ("BN", "SB", "PAG", "PAW")
CONTEXT_FEATURES = ("demand_mw", "solar_cf", "wind_cf")


@dataclass(frozen=True)
class Strategy:
    tag: str
    k: int = 100
    blocks: int = 10

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ValueError(f"unknown strategy {self.tag!r}")
        if self.k < 1 or self.blocks < 1:
            raise ValueError("K and B must be positive")

    @property
    def needs_history(self) -> bool:
        return self.tag in ("PAG", "PAW")


def dn_context(system: PowerSystem, host: str, t: int, features=CONTEXT_FEATURES) -> np.ndarray:
    """Context vector of the feeder at ``host`` in hour ``t``.

    Available features: aggregate baseline demand, mean solar capacity factor
    of the feeder, and mean wind capacity factor of the transmission zone.
    """
    dn = system.distribution[host]
    solar = [g.capacity_factor[t] for g in dn.generators if g.kind == "solar"]
    wind = [g.capacity_factor[t] for g in system.transmission.generators if g.kind == "wind"]
    values = {
        "demand_mw": float(sum(c.baseline[t] for c in dn.consumers)),
        "solar_cf": float(np.mean(solar)) if solar else 0.0,
        "wind_cf": float(np.mean(wind)) if wind else 0.0,
    }
    return np.array([values[f] for f in features])


@dataclass
class Clearing:
    prices: dict
    forecast: dict
    welfare: float
    dispatch: object
    bids: dict = field(default_factory=dict)
    seconds: float = 0.0


def clear_market(strategy: Strategy, system: PowerSystem, t: int, histories: dict | None = None,
                 opts: OpfOptions = DEFAULT_OPTIONS, features=CONTEXT_FEATURES) -> Clearing:
    """Step 1: clear the transmission market with each DN modeled per ``strategy``.

    ``histories`` maps DN id to :class:`~tsodso.learn.History`; it is required
    for the learning strategies. Substation prices are host-bus LMPs.
    """
    start = time.perf_counter()
    models, bids = {}, {}
    for host, dn in system.distribution.items():
        if strategy.tag == "BN":
            models[host] = DnModel.embedded()
        elif strategy.tag == "SB":
            models[host] = DnModel.aggregated()
        else:
            if not histories or dn.id not in histories or len(histories[dn.id]) == 0:
                raise ValueError(f"{strategy.tag} needs history for DN {dn.id}")
            hist = histories[dn.id]
            ctx = dn_context(system, host, t, features)
            k = min(strategy.k, len(hist))
            if strategy.tag == "PAG":
                models[host] = DnModel.fixed(knn_forecast(hist, ctx, k))
            else:
                bids[host] = learn_bid(hist, ctx, k, strategy.blocks)
                models[host] = DnModel.bid(bids[host])
    dispatch = solve_transmission(system, t, models, opts)
    prices = {host: dispatch.lmp[host] for host in system.distribution}
    return Clearing(prices, dict(dispatch.pn), dispatch.welfare, dispatch, bids,
                    time.perf_counter() - start)


def actual_dn_response(system: PowerSystem, t: int, prices: dict,
                       opts: OpfOptions = DEFAULT_OPTIONS):
    """Step 2: optimal response of every DN to its published price.

    Returns ``(dispatches by host, total DN welfare including payments)``.
    """
    out = {}
    for host, dn in sorted(system.distribution.items()):
        try:
            out[host] = solve_distribution(dn, t, prices[host], system, opts)
        except SolverError as exc:
            raise SolverError(f"actual response of DN {dn.id}: {exc}") from exc
    return out, float(sum(d.welfare_net for d in out.values()))


def power_imbalance(forecast_total: float, actual_total: float) -> float:
    """Step 3: relative imbalance in percent; NaN when the actual intake is zero."""
    if actual_total == 0:
        return math.nan
    return 100.0 * abs(forecast_total - actual_total) / abs(actual_total)


@dataclass
class Redispatch:
    sw_t: float
    sw_t_free: float
    slack_mw: float
    dispatch: object


def redispatch(system: PowerSystem, t: int, intakes: dict, prices: dict,
               opts: OpfOptions = DEFAULT_OPTIONS, penalty: float | None = None) -> Redispatch:
    """Step 4: re-dispatch the transmission grid with DN intakes fixed at their realized values.

    Every bus balance carries elastic slack priced at ``penalty`` (default
    ten times the upper demand price anchor) so the problem stays feasible.
    The TSO's welfare counts transmission consumers and generators plus the
    payments received from DNs at their substation prices; ``sw_t`` charges
    slack at the penalty, ``sw_t_free`` does not.
    """
    penalty = 10.0 * system.lambda_hi if penalty is None else penalty
    models = {host: DnModel.fixed(intakes[host]) for host in system.distribution}
    d = solve_transmission(system, t, models, opts, slack_penalty=penalty)
    payments = sum(prices[h] * intakes[h] for h in system.distribution)
    free = d.transmission_welfare + payments
    return Redispatch(free - d.slack_penalty, free, d.slack_mw, d)


@dataclass
class HourReport:
    hour: int
    strategy: str
    prices: dict
    forecast: dict
    actual: dict
    forecast_mw: float
    actual_mw: float
    delta_pct: float
    dn_delta_pct: dict
    sw_d: float
    sw_t: float
    sw_total: float
    sw_t_free: float
    slack_mw: float
    flex_forecast_pct: float
    flex_observed_pct: float
    clearing_welfare: float
    seconds: float
    eta: float = math.nan
    sw_bn: float = math.nan


def evaluate_hour(strategy: Strategy, system: PowerSystem, t: int, histories: dict | None = None,
                  opts: OpfOptions = DEFAULT_OPTIONS, features=CONTEXT_FEATURES) -> HourReport:
    try:
        clearing = clear_market(strategy, system, t, histories, opts, features)
    except SolverError as exc:
        raise SolverError(f"{strategy.tag} hour {t}, clearing: {exc}") from exc
    try:
        response, sw_d = actual_dn_response(system, t, clearing.prices, opts)
        actual = {h: d.pn for h, d in response.items()}
        re = redispatch(system, t, actual, clearing.prices, opts)
    except SolverError as exc:
        raise SolverError(f"{strategy.tag} hour {t}: {exc}") from exc
    fc_total = float(sum(clearing.forecast[h] for h in sorted(system.distribution)))
    ac_total = float(sum(actual[h] for h in sorted(system.distribution)))
    baseline = float(sum(c.baseline[t] for dn in system.dns() for c in dn.consumers))
    flex = (lambda p: 100.0 * abs(p - baseline) / baseline) if baseline > 0 else (lambda p: math.nan)
    return HourReport(
        hour=t, strategy=strategy.tag, prices=dict(clearing.prices),
        forecast=dict(clearing.forecast), actual=actual, forecast_mw=fc_total, actual_mw=ac_total,
        delta_pct=power_imbalance(fc_total, ac_total),
        dn_delta_pct={h: power_imbalance(clearing.forecast[h], actual[h]) for h in actual},
        sw_d=sw_d, sw_t=re.sw_t, sw_total=sw_d + re.sw_t, sw_t_free=re.sw_t_free,
        slack_mw=re.slack_mw, flex_forecast_pct=flex(fc_total), flex_observed_pct=flex(ac_total),
        clearing_welfare=clearing.welfare, seconds=clearing.seconds)


def welfare_allocation(reports, bn_reports) -> tuple[float, float]:
    """Average (TSO, DSO) shares of the welfare loss, in percent of BN welfare."""
    bn = {r.hour: r for r in bn_reports}
    hours = [r.hour for r in reports]
    if sorted(hours) != sorted(bn) or len(set(hours)) != len(hours):
        raise ValueError("reports and benchmark reports cover different hours")
    if not reports:
        raise ValueError("no reports")
    tso = [100.0 * (bn[r.hour].sw_t - r.sw_t) / abs(bn[r.hour].sw_total) for r in reports]
    dso = [100.0 * (bn[r.hour].sw_d - r.sw_d) / abs(bn[r.hour].sw_total) for r in reports]
    return float(np.mean(tso)), float(np.mean(dso))
