"""Capped-linear flexible demand.

A consumer with baseline ``p_hat`` and flexibility ``delta`` consumes
``p_hat (1 + delta)`` at prices at or below ``lambda_lo`` and
``p_hat (1 - delta)`` at or above ``lambda_hi``, linearly in between.
"""
from __future__ import annotations

from dataclasses import dataclass

from .grid import Consumer, demand_bounds


@dataclass(frozen=True)
class DemandCurve:
    alpha: float
    beta: float
    pmin: float
    pmax: float
    lambda_lo: float
    lambda_hi: float

    @property
    def flexible(self) -> bool:
        return self.beta > 0

    def inverse(self, p: float) -> float:
        """Marginal utility (EUR/MWh) at consumption ``p`` on the sloped part."""
        return (self.alpha - p) / self.beta


def curve_for(consumer: Consumer, t: int, lambda_lo: float, lambda_hi: float) -> DemandCurve:
    if not lambda_hi > lambda_lo:
        raise ValueError("lambda_hi must exceed lambda_lo")
    base = float(consumer.baseline[t])
    span = lambda_hi - lambda_lo
    alpha = base * (1.0 + consumer.delta * (lambda_hi + lambda_lo) / span)
    beta = 2.0 * base * consumer.delta / span
    lo, hi = demand_bounds(consumer, t)
    return DemandCurve(alpha, beta, lo, hi, lambda_lo, lambda_hi)


def demand_at_price(curve: DemandCurve, price: float) -> float:
    if price <= curve.lambda_lo:
        return curve.pmax
    if price >= curve.lambda_hi:
        return curve.pmin
    return curve.alpha - curve.beta * price


def utility_of(curve: DemandCurve, p: float, tol: float = 1e-9) -> float:
    """Consumer utility in EUR, the integral of the inverse demand from ``pmin`` to ``p``.

    Inflexible curves have no inverse demand; callers treat them as fixed
    loads with zero welfare contribution.
    """
    if not curve.flexible:
        raise ValueError("utility is undefined for an inflexible consumer")
    scale = tol * max(1.0, abs(curve.pmax))
    if p < curve.pmin - scale or p > curve.pmax + scale:
        raise ValueError(f"demand {p} outside [{curve.pmin}, {curve.pmax}]")
    a, b, lo = curve.alpha, curve.beta, curve.pmin
    return (a / b) * (p - lo) - (p * p - lo * lo) / (2.0 * b)


def utility_offset(curve: DemandCurve) -> float:
    """Constant dropped when utility is written as ``p^2/(2 beta) - (alpha/beta) p`` in a QP."""
    lo = curve.pmin
    return (curve.alpha / curve.beta) * lo - lo * lo / (2.0 * curve.beta)
