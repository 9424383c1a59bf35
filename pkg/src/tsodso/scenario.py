"""Synthetic desk-scale test system.

A 6-bus transmission grid with two thermal units and a wind farm, and three
8-node radial feeders, each with seven flexible consumers and two
inverter-connected solar units. Hourly series for baseline demand and
wind/solar capacity factors are synthesized from seasonal and diurnal
profiles plus autocorrelated noise.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .grid import (Consumer, DistributionGrid, Generator, GridError, Line, PowerSystem,
                   TransmissionGrid, scale_impedances)

VMIN2 = 0.95 ** 2
VMAX2 = 1.05 ** 2

# feeder shape: (from, to) by node index, node 0 is the substation
FEEDER_EDGES = ((0, 1), (1, 2), (2, 3), (3, 4), (2, 5), (5, 6), (6, 7))
# base per-unit impedance of each feeder section (on 100 MVA)
FEEDER_R = (0.062, 0.092, 0.110, 0.124, 0.092, 0.110, 0.124)
FEEDER_X = (0.047, 0.069, 0.083, 0.092, 0.069, 0.083, 0.092)
FEEDER_SMAX = (18.0, 14.0, 9.0, 6.0, 9.0, 7.0, 5.0)
CONSUMER_SHARE = (0.10, 0.14, 0.16, 0.16, 0.14, 0.15, 0.15)
SOLAR_NODES = (4, 7)

T_BUSES = ("B1", "B2", "B3", "B4", "B5", "B6")
T_EDGES = (("B1", "B2"), ("B2", "B3"), ("B3", "B4"), ("B4", "B5"), ("B5", "B6"), ("B6", "B1"),
           ("B2", "B5"))
T_X = (0.10, 0.12, 0.10, 0.12, 0.10, 0.12, 0.15)
T_SMAX = (150.0, 120.0, 120.0, 150.0, 120.0, 120.0, 100.0)
DN_HOSTS = ("B3", "B5", "B6")
# feeders differ in length, so congestion sets in at different impedance scalings
DN_LENGTH = (0.8, 1.1, 1.45)
T_LOADS = (("B2", 45.0), ("B4", 40.0), ("B5", 35.0))
# transmission loads swing strongly from day to day; feeder demand is steadier
T_DEMAND = dict(swing=0.35, seasonal=0.1, noise=0.06, day_spread=0.25)
DN_DEMAND = dict(swing=0.12, seasonal=0.04, noise=0.01)
DN_OWN_NOISE = 0.01


@dataclass(frozen=True)
class ScenarioConfig:
    horizon: int = 8760
    eta: float = 1.0
    dn_peak_mw: float = 16.0
    solar_mw: float = 3.0
    wind_mw: float = 90.0
    delta_lo: float = 0.5
    delta_hi: float = 0.75
    gamma: float = 0.4
    lambda_hi: float = 25.0
    lambda_lo: float = 10.0
    base_mva: float = 100.0

    def __post_init__(self):
        if self.horizon < 1:
            raise GridError("horizon must be at least one hour")
        if self.eta <= 0:
            raise GridError("eta must be positive")
        if not 0 <= self.delta_lo <= self.delta_hi:
            raise GridError("need 0 <= delta_lo <= delta_hi")
        if not self.lambda_hi > self.lambda_lo:
            raise GridError("lambda_hi must exceed lambda_lo")
        if min(self.dn_peak_mw, self.solar_mw, self.wind_mw, self.base_mva) < 0:
            raise GridError("capacities must be non-negative")


def _ar1(rng, n, phi, sigma):
    """Stationary AR(1) path with unit-free innovations ``sigma``."""
    e = rng.normal(0.0, sigma, n)
    out = np.empty(n)
    out[0] = e[0] / np.sqrt(1 - phi * phi)
    for i in range(1, n):
        out[i] = phi * out[i - 1] + e[i]
    return out


def demand_profile(hours: np.ndarray, rng, swing=0.35, seasonal=0.1, noise=0.04,
                   day_spread=0.0) -> np.ndarray:
    """Relative demand: evening peak of 1, night trough of ``1 - swing``, times slow factors."""
    day = (hours // 24).astype(int)
    hod = hours % 24
    season = 1.0 + seasonal * np.cos(2 * np.pi * (day - 15) / 365.0)
    shape = np.maximum(np.exp(-((hod - 19) / 3.0) ** 2), 0.5 * np.exp(-((hod - 9) / 2.5) ** 2))
    daily = 1.0 - swing * (1.0 - shape)
    level = 1.0 + day_spread * rng.uniform(-1.0, 1.0, day.max() + 1)[day]
    return season * daily * level * (1.0 + _ar1(rng, hours.size, 0.9, noise * np.sqrt(1 - 0.81)))


def solar_profile(hours: np.ndarray, rng) -> np.ndarray:
    day = (hours // 24).astype(int)
    hod = hours % 24
    shape = np.clip(np.sin(np.pi * (hod - 6) / 13.0), 0.0, None)
    season = 0.65 + 0.35 * np.cos(2 * np.pi * (day - 172) / 365.0)
    clouds = rng.uniform(0.35, 1.0, day.max() + 1)[day]
    return np.clip(shape * season * clouds, 0.0, 1.0)


def wind_profile(hours: np.ndarray, rng) -> np.ndarray:
    day = hours / 24.0
    base = 0.38 + 0.12 * np.cos(2 * np.pi * (day - 20) / 365.0)
    return np.clip(base + _ar1(rng, hours.size, 0.97, 0.06), 0.0, 1.0)


def generate_scenario(config: ScenarioConfig = ScenarioConfig(), seed: int = 0) -> PowerSystem:
    """Build the synthetic system; the same ``(config, seed)`` always gives the same system."""
    rng = np.random.default_rng(seed)
    hours = np.arange(config.horizon, dtype=float)
    sample_delta = lambda: float(rng.uniform(config.delta_lo, config.delta_hi))

    wind_cf = wind_profile(hours, rng)
    gens = (
        Generator("G1", "B1", 0.15, 3.0, 0.0, 160.0),
        Generator("G2", "B4", 0.25, 5.0, 0.0, 120.0),
        Generator("W1", "B2", 0.0, 0.0, 0.0, config.wind_mw, kind="wind", capacity_factor=wind_cf),
    )
    cons = tuple(Consumer(f"L{i + 1}", bus, peak * demand_profile(hours, rng, **T_DEMAND),
                          sample_delta(), 0.0)
                 for i, (bus, peak) in enumerate(T_LOADS))
    lines = tuple(Line(f"T{i + 1}", a, b, 0.0, x, s)
                  for i, ((a, b), x, s) in enumerate(zip(T_EDGES, T_X, T_SMAX)))
    tgrid = TransmissionGrid(T_BUSES, lines, "B1", config.base_mva, gens, cons)

    dns = {}
    for k, (host, length) in enumerate(zip(DN_HOSTS, DN_LENGTH), start=1):
        key = f"D{k}"
        nodes = tuple(f"{key}N{i}" for i in range(len(FEEDER_EDGES) + 1))
        dn_lines = tuple(Line(f"{key}L{i + 1}", nodes[a], nodes[b], length * r, length * x, s)
                         for i, ((a, b), r, x, s) in enumerate(zip(FEEDER_EDGES, FEEDER_R, FEEDER_X,
                                                                   FEEDER_SMAX)))
        shape = demand_profile(hours, rng, **DN_DEMAND)
        dn_cons = []
        for i, share in enumerate(CONSUMER_SHARE, start=1):
            own = 1.0 + DN_OWN_NOISE * rng.standard_normal(hours.size)
            base = np.clip(config.dn_peak_mw * share * shape * own, 0.0, None)
            dn_cons.append(Consumer(f"{key}C{i}", nodes[i], base, sample_delta(), config.gamma))
        solar = solar_profile(hours, rng)
        dn_gens = []
        for j, node in enumerate(SOLAR_NODES, start=1):
            cf = np.clip(solar * rng.uniform(0.9, 1.0), 0.0, 1.0)
            cap = config.solar_mw
            dn_gens.append(Generator(f"{key}S{j}", nodes[node], 0.0, 0.0, 0.0, cap, -0.3 * cap,
                                     0.3 * cap, 1.1 * cap, "solar", cf))
        dns[host] = DistributionGrid(key, nodes[0], host, nodes,
                                     {n: VMIN2 for n in nodes}, {n: VMAX2 for n in nodes},
                                     dn_lines, tuple(dn_gens), tuple(dn_cons))
    system = PowerSystem(tgrid, dns, config.lambda_hi, config.lambda_lo, config.horizon)
    return scale_impedances(system, config.eta) if config.eta != 1.0 else system


def relax_limits(system: PowerSystem) -> PowerSystem:
    """Copy of ``system`` with voltage, feeder and inverter limits out of the way."""
    dns = {}
    for host, dn in system.distribution.items():
        lines = tuple(dataclasses.replace(ln, smax=np.inf) for ln in dn.lines)
        gens = tuple(dataclasses.replace(g, sinv=None, qmin=-np.inf, qmax=np.inf) for g in dn.generators)
        dns[host] = dataclasses.replace(dn, lines=lines, generators=gens,
                                        vmin2={n: -np.inf for n in dn.nodes},
                                        vmax2={n: np.inf for n in dn.nodes})
    return system.replace(distribution=dns)
