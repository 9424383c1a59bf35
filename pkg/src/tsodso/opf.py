"""Market-clearing and distribution OPF problems as quadratic programs.

All problems maximize welfare; they are assembled in minimization form with
the utility offsets kept in the objective constant, so that
``welfare == -solution.objective`` exactly.

Distribution feeders use the LinDistFlow model with squared voltages; the
transmission grid uses a lossless DC power flow. Apparent-power disks of
inverters and distribution lines are replaced by inscribed polygons.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import qp as qpsolve
from .demand import curve_for, utility_offset, utility_of
from .grid import Consumer, DistributionGrid, Generator, PowerSystem

INFLEXIBLE_BETA = 1e-12


class SolverError(RuntimeError):
    """An optimization problem did not reach an optimal status."""


@dataclass(frozen=True)
class OpfOptions:
    sides: int = 16
    tol: float = 1e-8
    max_iter: int = 100


DEFAULT_OPTIONS = OpfOptions()


class ModelBuilder:
    """Incremental assembly of a :class:`~tsodso.qp.QuadraticProgram` with named rows."""

    def __init__(self):
        self.lb, self.ub, self.names = [], [], []
        self.index = {}
        self.qdiag = {}
        self.lin = {}
        self.const = 0.0
        self._eq, self._in = [], []
        self.eq_row, self.in_row = {}, {}

    def var(self, name, lb=-np.inf, ub=np.inf) -> int:
        if name in self.index:
            raise KeyError(f"duplicate variable {name!r}")
        self.index[name] = len(self.lb)
        self.names.append(name)
        self.lb.append(lb)
        self.ub.append(ub)
        return self.index[name]

    def cost(self, i, quad=0.0, linear=0.0):
        if quad:
            self.qdiag[i] = self.qdiag.get(i, 0.0) + quad
        if linear:
            self.lin[i] = self.lin.get(i, 0.0) + linear

    def eq(self, label, terms, rhs=0.0):
        self.eq_row[label] = len(self._eq)
        self._eq.append((terms, rhs))

    def le(self, label, terms, rhs):
        self.in_row[label] = len(self._in)
        self._in.append((terms, rhs))

    @staticmethod
    def _matrix(rows, n):
        data, ri, ci = [], [], []
        for r, (terms, _) in enumerate(rows):
            for j, coef in terms:
                ri.append(r)
                ci.append(j)
                data.append(coef)
        return sp.csr_matrix((data, (ri, ci)), shape=(len(rows), n))

    def build(self) -> qpsolve.QuadraticProgram:
        n = len(self.lb)
        idx = list(self.qdiag)
        Q = sp.csr_matrix(([self.qdiag[i] for i in idx], (idx, idx)), shape=(n, n))
        c = np.zeros(n)
        for i, v in self.lin.items():
            c[i] = v
        return qpsolve.QuadraticProgram(
            Q, c, self._matrix(self._eq, n), [r for _, r in self._eq],
            self._matrix(self._in, n), [r for _, r in self._in],
            np.array(self.lb, float), np.array(self.ub, float),
            list(self.eq_row), list(self.in_row), self.const)


# ---------------------------------------------------------------------------
# shared pieces

def _add_consumer(mb: ModelBuilder, name, con: Consumer, t, system: PowerSystem) -> int:
    curve = curve_for(con, t, system.lambda_lo, system.lambda_hi)
    if curve.beta > INFLEXIBLE_BETA:
        i = mb.var(name, curve.pmin, curve.pmax)
        mb.cost(i, quad=1.0 / curve.beta, linear=-curve.alpha / curve.beta)
        mb.const += utility_offset(curve)
    else:
        base = float(con.baseline[t])
        i = mb.var(name, base, base)
    return i


def _add_generator(mb: ModelBuilder, name, gen: Generator, t) -> int:
    i = mb.var(name, gen.pmin, max(gen.pmin, gen.pmax_at(t)))
    mb.cost(i, quad=gen.a, linear=gen.b)
    return i


def _add_disk(mb: ModelBuilder, label, ip, iq, rating, sides):
    if not np.isfinite(rating):
        return
    normals, rhs = qpsolve.polygonize_disk(rating, sides)
    for k, ((cp, cq), r) in enumerate(zip(normals, rhs)):
        mb.le((label, k), [(ip, cp), (iq, cq)], r)


def consumer_welfare(con: Consumer, t, p, system: PowerSystem) -> float:
    curve = curve_for(con, t, system.lambda_lo, system.lambda_hi)
    if curve.beta <= INFLEXIBLE_BETA:
        return 0.0
    return utility_of(curve, min(max(p, curve.pmin), curve.pmax))


def generation_cost(gen: Generator, p) -> float:
    return 0.5 * gen.a * p * p + gen.b * p


@dataclass
class _DnVars:
    pn: int
    qn: int
    pg: dict
    qg: dict
    pd: dict
    qd: dict
    pf: dict
    qf: dict
    v: dict


def _add_distribution(mb: ModelBuilder, dn: DistributionGrid, t, system: PowerSystem,
                      opts: OpfOptions) -> _DnVars:
    key = dn.id
    feeding = dn.feeding_line
    pn = mb.var((key, "pn"))
    qn = mb.var((key, "qn"))
    v = {}
    for n in dn.nodes:
        if n == dn.root:
            v[n] = mb.var((key, "v", n), 1.0, 1.0)
        else:
            v[n] = mb.var((key, "v", n), dn.vmin2[n], dn.vmax2[n])
    pg, qg = {}, {}
    for g in dn.generators:
        pg[g.id] = _add_generator(mb, (key, "pg", g.id), g, t)
        qg[g.id] = mb.var((key, "qg", g.id), g.qmin, g.qmax)
        if g.sinv is not None:
            _add_disk(mb, (key, "inv", g.id), pg[g.id], qg[g.id], g.sinv, opts.sides)
    pd, qd = {}, {}
    for c in dn.consumers:
        pd[c.id] = _add_consumer(mb, (key, "pd", c.id), c, t, system)
        qd[c.id] = mb.var((key, "qd", c.id))
        mb.eq((key, "pf_ratio", c.id), [(qd[c.id], 1.0), (pd[c.id], -c.gamma)])
    pf, qf = {}, {}
    for ln in dn.lines:
        pf[ln.id] = mb.var((key, "pf", ln.id), -ln.smax, ln.smax)
        qf[ln.id] = mb.var((key, "qf", ln.id), -ln.smax, ln.smax)
        _add_disk(mb, (key, "line", ln.id), pf[ln.id], qf[ln.id], ln.smax, opts.sides)

    # nodal balances: injection - withdrawal = outflow - inflow
    p_terms = {n: [] for n in dn.nodes}
    q_terms = {n: [] for n in dn.nodes}
    p_terms[dn.root] += [(pn, 1.0)]
    q_terms[dn.root] += [(qn, 1.0)]
    for g in dn.generators:
        p_terms[g.bus].append((pg[g.id], 1.0))
        q_terms[g.bus].append((qg[g.id], 1.0))
    for c in dn.consumers:
        p_terms[c.bus].append((pd[c.id], -1.0))
        q_terms[c.bus].append((qd[c.id], -1.0))
    for ln in dn.lines:
        p_terms[ln.from_bus].append((pf[ln.id], -1.0))
        p_terms[ln.to_bus].append((pf[ln.id], 1.0))
        q_terms[ln.from_bus].append((qf[ln.id], -1.0))
        q_terms[ln.to_bus].append((qf[ln.id], 1.0))
    for n in dn.nodes:
        mb.eq((key, "pbal", n), p_terms[n])
        mb.eq((key, "qbal", n), q_terms[n])

    k = 2.0 / system.base_mva
    for n, (ln, sign) in feeding.items():
        par = dn.parents[n]
        mb.eq((key, "volt", n), [(v[n], 1.0), (v[par], -1.0),
                                 (pf[ln.id], k * sign * ln.r), (qf[ln.id], k * sign * ln.x)])
    return _DnVars(pn, qn, pg, qg, pd, qd, pf, qf, v)


def _dn_welfare(dn: DistributionGrid, t, x, dv: _DnVars, system: PowerSystem) -> float:
    u = sum(consumer_welfare(c, t, x[dv.pd[c.id]], system) for c in dn.consumers)
    cost = sum(generation_cost(g, x[dv.pg[g.id]]) for g in dn.generators)
    return u - cost


# ---------------------------------------------------------------------------
# distribution network problem

@dataclass
class DistributionDispatch:
    dn: str
    price: float
    pn: float
    qn: float
    pg: dict
    qg: dict
    pd: dict
    qd: dict
    pf: dict
    qf: dict
    v: dict
    welfare: float
    welfare_net: float


def build_distribution_opf(dn: DistributionGrid, t: int, price: float, system: PowerSystem,
                           opts: OpfOptions = DEFAULT_OPTIONS):
    """Return ``(qp, builder, variables)`` for the DN welfare problem at substation price ``price``."""
    mb = ModelBuilder()
    dv = _add_distribution(mb, dn, t, system, opts)
    mb.cost(dv.pn, linear=price)
    return mb.build(), mb, dv


def solve_distribution(dn: DistributionGrid, t: int, price: float, system: PowerSystem,
                       opts: OpfOptions = DEFAULT_OPTIONS) -> DistributionDispatch:
    qp, mb, dv = build_distribution_opf(dn, t, price, system, opts)
    sol = qpsolve.solve(qp, opts.tol, opts.max_iter)
    if not sol.ok:
        raise SolverError(f"DN {dn.id}, hour {t}, price {price:.4f}: solver status {sol.status}")
    x = sol.x
    welfare = _dn_welfare(dn, t, x, dv, system)
    val = lambda d: {k: float(x[i]) for k, i in d.items()}
    return DistributionDispatch(dn.id, price, float(x[dv.pn]), float(x[dv.qn]), val(dv.pg),
                                val(dv.qg), val(dv.pd), val(dv.qd), val(dv.pf), val(dv.qf),
                                val(dv.v), welfare, welfare - price * float(x[dv.pn]))


# ---------------------------------------------------------------------------
# transmission clearing

@dataclass(frozen=True)
class DnModel:
    """How one distribution network is represented inside transmission clearing."""

    kind: str
    forecast: float | None = None
    curve: object = None

    @classmethod
    def embedded(cls):
        return cls("embedded")

    @classmethod
    def aggregated(cls):
        return cls("aggregated")

    @classmethod
    def fixed(cls, mw: float):
        return cls("fixed", forecast=float(mw))

    @classmethod
    def bid(cls, curve):
        return cls("bid", curve=curve)


@dataclass
class TransmissionDispatch:
    pg: dict
    pd: dict
    pf: dict
    theta: dict
    pn: dict
    lmp: dict
    welfare: float
    transmission_welfare: float
    slack: dict = field(default_factory=dict)
    slack_penalty: float = 0.0
    dn_dispatch: dict = field(default_factory=dict)
    iterations: int = 0

    @property
    def slack_mw(self) -> float:
        return float(sum(abs(v) for v in self.slack.values()))


def build_transmission_clearing(system: PowerSystem, t: int, dn_models: dict,
                                opts: OpfOptions = DEFAULT_OPTIONS, slack_penalty: float | None = None):
    """Assemble the transmission market problem with each DN represented per ``dn_models``.

    ``dn_models`` maps host bus to :class:`DnModel`. With ``slack_penalty`` set,
    every bus balance gets non-negative up/down slack priced at that value.
    Returns ``(qp, builder, info)``.
    """
    tg = system.transmission
    missing = set(system.distribution) - set(dn_models)
    if missing:
        raise ValueError(f"no DN model for host buses {sorted(missing)}")
    mb = ModelBuilder()
    theta = {b: mb.var(("theta", b), *((0.0, 0.0) if b == tg.slack else (-np.inf, np.inf)))
             for b in tg.buses}
    pf = {ln.id: mb.var(("pf", ln.id), -ln.smax, ln.smax) for ln in tg.lines}
    pg = {g.id: _add_generator(mb, ("pg", g.id), g, t) for g in tg.generators}
    pd = {c.id: _add_consumer(mb, ("pd", c.id), c, t, system) for c in tg.consumers}
    terms = {b: [] for b in tg.buses}
    for g in tg.generators:
        terms[g.bus].append((pg[g.id], 1.0))
    for c in tg.consumers:
        terms[c.bus].append((pd[c.id], -1.0))
    for ln in tg.lines:
        terms[ln.from_bus].append((pf[ln.id], -1.0))
        terms[ln.to_bus].append((pf[ln.id], 1.0))
        k = system.base_mva / ln.x
        mb.eq(("flow", ln.id), [(pf[ln.id], 1.0), (theta[ln.from_bus], -k), (theta[ln.to_bus], k)])

    info = {"theta": theta, "pf": pf, "pg": pg, "pd": pd, "pn": {}, "dn_vars": {}, "agg": {},
            "bid": {}, "slack": {}}
    for host, model in sorted(dn_models.items()):
        dn = system.distribution[host]
        if model.kind == "embedded":
            dv = _add_distribution(mb, dn, t, system, opts)
            info["dn_vars"][host] = dv
            pn = dv.pn
        elif model.kind == "aggregated":
            gi = {g.id: _add_generator(mb, ("agg_pg", host, g.id), g, t) for g in dn.generators}
            ci = {c.id: _add_consumer(mb, ("agg_pd", host, c.id), c, t, system) for c in dn.consumers}
            pn = mb.var(("pn", host))
            mb.eq(("agg", host), [(pn, 1.0)] + [(i, 1.0) for i in gi.values()]
                  + [(i, -1.0) for i in ci.values()])
            info["agg"][host] = (gi, ci)
        elif model.kind == "fixed":
            pn = mb.var(("pn", host), model.forecast, model.forecast)
        elif model.kind == "bid":
            curve = model.curve
            pn = mb.var(("pn", host))
            row = [(pn, 1.0)]
            prev = curve.base
            blocks = []
            for b, (price, qty) in enumerate(curve.blocks, start=1):
                width = qty - prev
                if width < 0:
                    raise ValueError(f"bid curve for {host}: block {b} quantities decrease")
                j = mb.var(("pb", host, b), 0.0, width)
                mb.cost(j, linear=-price)
                row.append((j, -1.0))
                blocks.append(j)
                prev = qty
            mb.eq(("bid", host), row, curve.base)
            info["bid"][host] = blocks
        else:
            raise ValueError(f"unknown DN model {model.kind!r}")
        info["pn"][host] = pn
        terms[host].append((pn, -1.0))

    if slack_penalty is not None:
        for b in tg.buses:
            up = mb.var(("slack_up", b), 0.0)
            dn_ = mb.var(("slack_dn", b), 0.0)
            mb.cost(up, linear=slack_penalty)
            mb.cost(dn_, linear=slack_penalty)
            terms[b] += [(up, 1.0), (dn_, -1.0)]
            info["slack"][b] = (up, dn_)
    for b in tg.buses:
        mb.eq(("bal", b), terms[b])
    return mb.build(), mb, info


def solve_transmission(system: PowerSystem, t: int, dn_models: dict,
                       opts: OpfOptions = DEFAULT_OPTIONS,
                       slack_penalty: float | None = None) -> TransmissionDispatch:
    """Clear the transmission market; LMPs are the marginal cost of load at each bus."""
    qp, mb, info = build_transmission_clearing(system, t, dn_models, opts, slack_penalty)
    sol = qpsolve.solve(qp, opts.tol, opts.max_iter)
    if not sol.ok:
        raise SolverError(f"transmission clearing, hour {t}: solver status {sol.status}")
    x = sol.x
    tg = system.transmission
    val = lambda d: {k: float(x[i]) for k, i in d.items()}
    lmp = {b: -float(sol.eq_duals[mb.eq_row[("bal", b)]]) for b in tg.buses}
    slack = {b: float(x[u] - x[d]) for b, (u, d) in info["slack"].items()}
    penalty = (slack_penalty or 0.0) * sum(float(x[u] + x[d]) for u, d in info["slack"].values())
    tw = (sum(consumer_welfare(c, t, x[info["pd"][c.id]], system) for c in tg.consumers)
          - sum(generation_cost(g, x[info["pg"][g.id]]) for g in tg.generators))
    dn_dispatch = {}
    for host, dv in info["dn_vars"].items():
        dn = system.distribution[host]
        w = _dn_welfare(dn, t, x, dv, system)
        dn_dispatch[host] = DistributionDispatch(
            dn.id, lmp[host], float(x[dv.pn]), float(x[dv.qn]), val(dv.pg), val(dv.qg),
            val(dv.pd), val(dv.qd), val(dv.pf), val(dv.qf), val(dv.v), w,
            w - lmp[host] * float(x[dv.pn]))
    return TransmissionDispatch(val(info["pg"]), val(info["pd"]), val(info["pf"]),
                                val(info["theta"]), val(info["pn"]), lmp, -sol.objective, tw,
                                slack, penalty, dn_dispatch, sol.iterations)
