import numpy as np
import pytest

from tsodso.grid import (Consumer, DistributionGrid, Generator, Line, PowerSystem,
                         TransmissionGrid)

LAM_HI, LAM_LO = 25.0, 10.0


def two_bus(load=50.0, smax=100.0, second_gen=False, dn=None, horizon=1, delta=0.0):
    """Bus 1 with a (a=0.02, b=10) unit, bus 2 with a load; optional DN at bus 2."""
    gens = [Generator("G1", "1", 0.02, 10.0, 0.0, 500.0)]
    if second_gen:
        gens.append(Generator("G2", "2", 0.0, 20.0, 0.0, 500.0))
    cons = ()
    if load:
        cons = (Consumer("L2", "2", np.full(horizon, float(load)), delta, 0.0),)
    tg = TransmissionGrid(("1", "2"), (Line("T12", "1", "2", 0.0, 0.1, smax),), "1", 100.0,
                          tuple(gens), cons)
    dns = {dn.host: dn} if dn is not None else {}
    return PowerSystem(tg, dns, LAM_HI, LAM_LO, horizon)


def single_consumer_dn(baseline=10.0, delta=0.5, gamma=0.3, host="2", horizon=1, solar=None,
                       r=0.01, x=0.01, smax=100.0, vmin2=0.9025, vmax2=1.1025):
    """Root plus one consumer node; ``solar`` adds a zero-cost unit of that size at the node."""
    gens = ()
    if solar:
        gens = (Generator("S1", "n1", 0.0, 0.0, 0.0, solar, -solar, solar, None, "solar",
                          np.ones(horizon)),)
    return DistributionGrid(
        "D1", "n0", host, ("n0", "n1"), {"n0": vmin2, "n1": vmin2}, {"n0": vmax2, "n1": vmax2},
        (Line("d1", "n0", "n1", r, x, smax),), gens,
        (Consumer("c1", "n1", np.full(horizon, float(baseline)), delta, gamma),))


def feeder(key="D1", host="2", n=4, baseline=8.0, delta=0.6, gamma=0.3, r=0.05, x=0.04,
           smax=30.0, solar=3.0, horizon=1, seed=0):
    """Path feeder root-1-...-(n-1); one consumer per non-root node, solar at the end."""
    rng = np.random.default_rng(seed)
    nodes = tuple(f"{key}n{i}" for i in range(n))
    lines = tuple(Line(f"{key}l{i}", nodes[i - 1], nodes[i], r, x, smax) for i in range(1, n))
    cons = tuple(Consumer(f"{key}c{i}", nodes[i],
                          baseline * rng.uniform(0.7, 1.3, horizon), delta, gamma)
                 for i in range(1, n))
    gens = ()
    if solar:
        gens = (Generator(f"{key}s", nodes[-1], 0.0, 0.0, 0.0, solar, -solar / 2, solar / 2,
                          1.1 * solar, "solar", rng.uniform(0, 1, horizon)),)
    return DistributionGrid(key, nodes[0], host, nodes, {v: 0.95 ** 2 for v in nodes},
                            {v: 1.05 ** 2 for v in nodes}, lines, gens, cons)


def small_system(horizon=4, seed=0, **feeder_kw):
    """Three-bus ring with two thermal units, a flexible load and two feeders."""
    rng = np.random.default_rng(seed)
    gens = (Generator("G1", "1", 0.1, 5.0, 0.0, 200.0), Generator("G2", "3", 0.2, 8.0, 0.0, 100.0))
    cons = (Consumer("L2", "2", 40.0 * rng.uniform(0.8, 1.2, horizon), 0.5, 0.0),)
    lines = (Line("a", "1", "2", 0.0, 0.1, 80.0), Line("b", "2", "3", 0.0, 0.1, 80.0),
             Line("c", "1", "3", 0.0, 0.1, 80.0))
    tg = TransmissionGrid(("1", "2", "3"), lines, "1", 100.0, gens, cons)
    dns = {"2": feeder("D1", "2", horizon=horizon, seed=seed + 1, **feeder_kw),
           "3": feeder("D2", "3", horizon=horizon, seed=seed + 2, **feeder_kw)}
    return PowerSystem(tg, dns, LAM_HI, LAM_LO, horizon)


@pytest.fixture
def system():
    return small_system()


def pytest_configure(config):
    config._criteria = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, ok, detail)``."""
    def record(n, ok, detail):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config._criteria[n] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criteria", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
