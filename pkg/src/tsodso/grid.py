"""Network data model: transmission grid, radial distribution feeders, time series.

Units at the interface are MW / MVAr / MVA. Impedances are per unit on the
system base ``base_mva`` and voltages are squared magnitudes in p.u.^2.

The on-disk format is a directory of CSV files (see :func:`load_system`).
"""
from __future__ import annotations

import dataclasses
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import pandas as pd

TRANSMISSION = "T"
KINDS = ("thermal", "wind", "solar")


class GridError(ValueError):
    """Raised when network data is missing, inconsistent or structurally invalid."""


@dataclass(frozen=True, eq=False)
class Generator:
    id: str
    bus: str
    a: float
    b: float
    pmin: float
    pmax: float
    qmin: float = 0.0
    qmax: float = 0.0
    sinv: float | None = None
    kind: str = "thermal"
    capacity_factor: np.ndarray = field(default_factory=lambda: np.ones(1))

    def __post_init__(self):
        if self.kind not in KINDS:
            raise GridError(f"generator {self.id}: unknown kind {self.kind!r}")
        if self.pmin > self.pmax or self.qmin > self.qmax:
            raise GridError(f"generator {self.id}: lower limit above upper limit")
        if self.a < 0 or self.b < 0:
            raise GridError(f"generator {self.id}: cost coefficients must be >= 0")
        if self.kind != "thermal" and (self.a != 0 or self.b != 0):
            raise GridError(f"generator {self.id}: renewable units have zero cost")
        cf = self.capacity_factor
        if np.any(cf < 0) or np.any(cf > 1):
            raise GridError(f"generator {self.id}: capacity factor outside [0, 1]")
        if self.kind == "thermal" and not np.all(cf == 1):
            raise GridError(f"generator {self.id}: thermal capacity factor must be 1")

    def pmax_at(self, t: int) -> float:
        cf = self.capacity_factor
        return float((cf[0] if cf.size == 1 else cf[t]) * self.pmax)


@dataclass(frozen=True, eq=False)
class Consumer:
    id: str
    bus: str
    baseline: np.ndarray
    delta: float = 0.0
    gamma: float = 0.0

    def __post_init__(self):
        if self.delta < 0:
            raise GridError(f"consumer {self.id}: flexibility must be >= 0")
        if np.any(self.baseline < 0):
            raise GridError(f"consumer {self.id}: negative baseline demand")


@dataclass(frozen=True)
class Line:
    id: str
    from_bus: str
    to_bus: str
    r: float
    x: float
    smax: float

    def __post_init__(self):
        if self.x <= 0 or self.r < 0 or self.smax <= 0:
            raise GridError(f"line {self.id}: need x > 0, r >= 0, smax > 0")


def demand_bounds(consumer: Consumer, t: int) -> tuple[float, float]:
    """Return the (min, max) demand of ``consumer`` in hour ``t`` in MW."""
    base = float(consumer.baseline[t])
    return base * (1.0 - consumer.delta), base * (1.0 + consumer.delta)


@dataclass(frozen=True, eq=False)
class TransmissionGrid:
    buses: tuple[str, ...]
    lines: tuple[Line, ...]
    slack: str
    base_mva: float
    generators: tuple[Generator, ...] = ()
    consumers: tuple[Consumer, ...] = ()


@dataclass(frozen=True, eq=False)
class DistributionGrid:
    id: str
    root: str
    host: str
    nodes: tuple[str, ...]
    vmin2: dict
    vmax2: dict
    lines: tuple[Line, ...]
    generators: tuple[Generator, ...] = ()
    consumers: tuple[Consumer, ...] = ()

    @cached_property
    def parents(self) -> dict[str, str]:
        return validate_radial(self)

    @cached_property
    def feeding_line(self) -> dict[str, tuple[Line, int]]:
        """Map each non-root node to (line from its parent, orientation sign).

        The sign is +1 when the stored line runs parent -> child, so that
        ``sign * p_flow`` is the power flowing towards the node.
        """
        parents = self.parents
        out = {}
        for ln in self.lines:
            if parents.get(ln.to_bus) == ln.from_bus:
                out[ln.to_bus] = (ln, 1)
            else:
                out[ln.from_bus] = (ln, -1)
        return out


@dataclass(frozen=True, eq=False)
class PowerSystem:
    transmission: TransmissionGrid
    distribution: dict
    lambda_hi: float
    lambda_lo: float
    horizon: int

    def __post_init__(self):
        if not self.lambda_hi > self.lambda_lo:
            raise GridError("lambda_hi must exceed lambda_lo")
        buses = set(self.transmission.buses)
        for dn in self.distribution.values():
            if dn.host not in buses:
                raise GridError(f"DN {dn.id}: host bus {dn.host} not in transmission grid")

    @property
    def base_mva(self) -> float:
        return self.transmission.base_mva

    def dns(self) -> list[DistributionGrid]:
        return [self.distribution[k] for k in sorted(self.distribution)]

    def replace(self, **changes) -> "PowerSystem":
        return dataclasses.replace(self, **changes)


def validate_radial(dn: DistributionGrid) -> dict[str, str]:
    """Breadth-first traversal from the root; returns the child -> parent map.

    Line direction is ignored. Raises :class:`GridError` on a cycle or an
    unreachable node.
    """
    nodes = set(dn.nodes)
    if dn.root not in nodes:
        raise GridError(f"DN {dn.id}: root {dn.root} is not one of its nodes")
    adj = {n: [] for n in dn.nodes}
    for ln in dn.lines:
        if ln.from_bus not in nodes or ln.to_bus not in nodes:
            raise GridError(f"DN {dn.id}: line {ln.id} references unknown node")
        adj[ln.from_bus].append(ln.to_bus)
        adj[ln.to_bus].append(ln.from_bus)
    if len(dn.lines) >= len(dn.nodes):
        raise GridError(f"DN {dn.id}: not radial, cycle detected")
    parents = {}
    seen = {dn.root}
    queue = deque([dn.root])
    while queue:
        u = queue.popleft()
        for w in adj[u]:
            if w == parents.get(u):
                continue
            if w in seen:
                raise GridError(f"DN {dn.id}: not radial, cycle detected at {w}")
            seen.add(w)
            parents[w] = u
            queue.append(w)
    missing = nodes - seen
    if missing:
        raise GridError(f"DN {dn.id}: unreachable nodes {sorted(missing)}")
    return parents


def scale_impedances(system: PowerSystem, eta: float) -> PowerSystem:
    """Multiply resistance and reactance of every distribution line by ``eta``."""
    if eta <= 0:
        raise GridError("impedance scaling factor must be positive")
    dns = {}
    for key, dn in system.distribution.items():
        lines = tuple(dataclasses.replace(ln, r=ln.r * eta, x=ln.x * eta) for ln in dn.lines)
        dns[key] = dataclasses.replace(dn, lines=lines)
    return system.replace(distribution=dns)


# ---------------------------------------------------------------------------
# CSV I/O

_FILES = ("buses.csv", "lines.csv", "generators.csv", "consumers.csv", "timeseries.csv", "config.txt")


def read_config(path) -> dict[str, str]:
    out = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise GridError(f"{path}: malformed line {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _opt_float(v):
    if v is None or (isinstance(v, float) and math.isnan(v)) or v == "":
        return None
    return float(v)


def load_system(root_path) -> PowerSystem:
    """Read a system directory and return a fully linked :class:`PowerSystem`.

    Expected files: ``buses.csv`` (id,system,vmin2,vmax2[,host]),
    ``lines.csv`` (id,system,from,to,r,x,smax), ``generators.csv``
    (id,system,bus,a,b,pmin,pmax,qmin,qmax,sinv,kind), ``consumers.csv``
    (id,system,bus,delta,gamma), ``timeseries.csv`` (hour,entity_id,field,value)
    and ``config.txt`` with base_mva, lambda_hi, lambda_lo and slack_bus.
    Buses with ``system`` equal to ``T`` belong to the transmission grid;
    any other value names a distribution network, whose root node carries
    the host transmission bus in the ``host`` column.
    """
    root = Path(root_path)
    for name in _FILES:
        if not (root / name).is_file():
            raise GridError(f"missing file {root / name}")
    cfg = read_config(root / "config.txt")
    try:
        base_mva = float(cfg["base_mva"])
        lam_hi = float(cfg["lambda_hi"])
        lam_lo = float(cfg["lambda_lo"])
        slack = cfg["slack_bus"]
    except KeyError as exc:
        raise GridError(f"config.txt: missing key {exc}") from None
    if not lam_hi > lam_lo:
        raise GridError("config.txt: lambda_hi must exceed lambda_lo")

    read = lambda name: pd.read_csv(root / name, dtype=str, keep_default_na=False)
    buses = read("buses.csv")
    lines = read("lines.csv")
    gens = read("generators.csv")
    cons = read("consumers.csv")
    ts = pd.read_csv(root / "timeseries.csv", dtype={"entity_id": str, "field": str},
                     float_precision="round_trip")

    if buses["id"].duplicated().any():
        raise GridError("buses.csv: duplicate bus id")
    # time series are keyed by entity id alone
    ids = pd.concat([gens["id"], cons["id"]])
    if ids.duplicated().any():
        raise GridError(f"duplicate generator/consumer id {ids[ids.duplicated()].iloc[0]!r}")
    bus_system = dict(zip(buses["id"], buses["system"]))

    horizon = int(ts["hour"].max()) + 1 if len(ts) else 1
    series = {}
    for (eid, fld), grp in ts.groupby(["entity_id", "field"], sort=False):
        if fld not in ("baseline_demand", "capacity_factor"):
            raise GridError(f"timeseries.csv: unknown field {fld!r}")
        arr = np.full(horizon, np.nan)
        arr[grp["hour"].to_numpy(int)] = grp["value"].to_numpy(float)
        series[(eid, fld)] = arr

    def check_bus(kind, eid, system, bus):
        if bus not in bus_system:
            raise GridError(f"{kind} {eid}: dangling bus reference {bus!r}")
        if bus_system[bus] != system:
            raise GridError(f"{kind} {eid}: bus {bus} belongs to system {bus_system[bus]}")

    gen_by_sys = {}
    for row in gens.itertuples(index=False):
        check_bus("generator", row.id, row.system, row.bus)
        cf = series.get((row.id, "capacity_factor"))
        if cf is None:
            if row.kind != "thermal":
                raise GridError(f"generator {row.id}: missing capacity_factor series")
            cf = np.ones(horizon)
        if np.isnan(cf).any():
            raise GridError(f"generator {row.id}: capacity_factor series has gaps")
        g = Generator(row.id, row.bus, float(row.a), float(row.b), float(row.pmin),
                      float(row.pmax), float(row.qmin or 0), float(row.qmax or 0),
                      _opt_float(row.sinv), row.kind, cf)
        gen_by_sys.setdefault(row.system, []).append(g)

    con_by_sys = {}
    for row in cons.itertuples(index=False):
        check_bus("consumer", row.id, row.system, row.bus)
        base = series.get((row.id, "baseline_demand"))
        if base is None or np.isnan(base).any():
            raise GridError(f"consumer {row.id}: missing or incomplete baseline_demand series")
        c = Consumer(row.id, row.bus, base, float(row.delta), float(row.gamma))
        con_by_sys.setdefault(row.system, []).append(c)

    line_by_sys = {}
    for _, row in lines.iterrows():
        for end in (row["from"], row["to"]):
            check_bus("line", row["id"], row["system"], end)
        ln = Line(row["id"], row["from"], row["to"], float(row["r"] or 0), float(row["x"]),
                  float(row["smax"]))
        line_by_sys.setdefault(row["system"], []).append(ln)

    t_buses = tuple(buses.loc[buses["system"] == TRANSMISSION, "id"])
    if slack not in t_buses:
        raise GridError(f"slack bus {slack!r} not in transmission grid")
    tgrid = TransmissionGrid(t_buses, tuple(line_by_sys.get(TRANSMISSION, ())), slack, base_mva,
                             tuple(gen_by_sys.get(TRANSMISSION, ())),
                             tuple(con_by_sys.get(TRANSMISSION, ())))
    _check_connected(tgrid)

    has_host = "host" in buses.columns
    dns = {}
    for sys_id, grp in buses[buses["system"] != TRANSMISSION].groupby("system", sort=True):
        roots = grp[grp["host"] != ""] if has_host else grp.iloc[0:0]
        if len(roots) != 1:
            raise GridError(f"DN {sys_id}: exactly one node must name a host bus")
        root_id, host = roots.iloc[0]["id"], roots.iloc[0]["host"]
        dn = DistributionGrid(
            sys_id, root_id, host, tuple(grp["id"]),
            {n: float(v) for n, v in zip(grp["id"], grp["vmin2"])},
            {n: float(v) for n, v in zip(grp["id"], grp["vmax2"])},
            tuple(line_by_sys.get(sys_id, ())),
            tuple(gen_by_sys.get(sys_id, ())), tuple(con_by_sys.get(sys_id, ())))
        dn.parents  # validate eagerly
        if host in {d.host for d in dns.values()}:
            raise GridError(f"DN {sys_id}: host bus {host} already hosts a DN")
        dns[host] = dn
    for sys_id in set(bus_system.values()) - {TRANSMISSION} - {d.id for d in dns.values()}:
        raise GridError(f"system {sys_id} has no buses")
    return PowerSystem(tgrid, dns, lam_hi, lam_lo, horizon)


def _check_connected(tgrid: TransmissionGrid) -> None:
    adj = {b: set() for b in tgrid.buses}
    for ln in tgrid.lines:
        adj[ln.from_bus].add(ln.to_bus)
        adj[ln.to_bus].add(ln.from_bus)
    seen = {tgrid.slack}
    stack = [tgrid.slack]
    while stack:
        for w in adj[stack.pop()] - seen:
            seen.add(w)
            stack.append(w)
    if len(seen) != len(tgrid.buses):
        raise GridError("transmission grid is not connected")


def write_system(system: PowerSystem, root_path) -> None:
    """Write ``system`` in the directory format read by :func:`load_system`."""
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    tg = system.transmission
    bus_rows = [(b, TRANSMISSION, "", "", "") for b in tg.buses]
    line_rows = [(ln.id, TRANSMISSION, ln.from_bus, ln.to_bus, ln.r, ln.x, ln.smax) for ln in tg.lines]
    gen_rows, con_rows, ts_rows = [], [], []

    def add_units(sys_id, gens, cons):
        for g in gens:
            gen_rows.append((g.id, sys_id, g.bus, g.a, g.b, g.pmin, g.pmax, g.qmin, g.qmax,
                             "" if g.sinv is None else g.sinv, g.kind))
            if g.kind != "thermal":
                ts_rows.append((g.id, "capacity_factor", g.capacity_factor))
        for c in cons:
            con_rows.append((c.id, sys_id, c.bus, c.delta, c.gamma))
            ts_rows.append((c.id, "baseline_demand", c.baseline))

    add_units(TRANSMISSION, tg.generators, tg.consumers)
    for dn in system.dns():
        for n in dn.nodes:
            bus_rows.append((n, dn.id, dn.vmin2[n], dn.vmax2[n], dn.host if n == dn.root else ""))
        line_rows += [(ln.id, dn.id, ln.from_bus, ln.to_bus, ln.r, ln.x, ln.smax) for ln in dn.lines]
        add_units(dn.id, dn.generators, dn.consumers)

    pd.DataFrame(bus_rows, columns=["id", "system", "vmin2", "vmax2", "host"]).to_csv(
        root / "buses.csv", index=False)
    pd.DataFrame(line_rows, columns=["id", "system", "from", "to", "r", "x", "smax"]).to_csv(
        root / "lines.csv", index=False, float_format="%.17g")
    pd.DataFrame(gen_rows, columns=["id", "system", "bus", "a", "b", "pmin", "pmax", "qmin", "qmax",
                                    "sinv", "kind"]).to_csv(root / "generators.csv", index=False,
                                                            float_format="%.17g")
    pd.DataFrame(con_rows, columns=["id", "system", "bus", "delta", "gamma"]).to_csv(
        root / "consumers.csv", index=False, float_format="%.17g")
    hours = np.arange(system.horizon)
    frames = [pd.DataFrame({"hour": hours, "entity_id": eid, "field": fld, "value": arr})
              for eid, fld, arr in ts_rows]
    ts = (pd.concat(frames, ignore_index=True) if frames
          else pd.DataFrame(columns=["hour", "entity_id", "field", "value"]))
    ts.to_csv(root / "timeseries.csv", index=False, float_format="%.17g")
    (root / "config.txt").write_text(
        f"base_mva={system.base_mva!r}\nlambda_hi={system.lambda_hi!r}\n"
        f"lambda_lo={system.lambda_lo!r}\nslack_bus={tg.slack}\n", encoding="utf-8")
