"""Experiment harness: history building, the impedance sweep, and summary tables.

Percentiles are nearest-rank (the smallest value with at least q% of the
sample at or below it), so p5 and p95 are always observed values.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .coord import CONTEXT_FEATURES, TAGS, Strategy, clear_market, dn_context, evaluate_hour
from .grid import PowerSystem, load_system, read_config, scale_impedances
from .learn import History, HistoryRecord
from .opf import OpfOptions, SolverError
from .scenario import ScenarioConfig, generate_scenario

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("hour", "strategy", "eta", "delta_pct", "sw_total", "sw_t", "sw_d", "sw_bn",
                  "forecast_mw", "actual_mw", "slack_mw", "flex_forecast_pct", "flex_observed_pct",
                  "sw_t_free", "seconds")


@dataclass(frozen=True)
class ExperimentConfig:
    system: str | None = None
    etas: tuple = (0.67, 1.0, 1.33)
    seed: int = 0
    train_hours: int = 336
    test_hours: int = 24
    k: int = 30
    blocks: int = 10
    strategies: tuple = TAGS
    out: str | None = None
    sides: int = 16
    tol: float = 1e-8
    max_iter: int = 100
    horizon: int = 8760
    workers: int = 1

    def __post_init__(self):
        if not self.etas or any(e <= 0 for e in self.etas):
            raise ValueError("eta values must be positive")
        if self.k < 1 or self.blocks < 1:
            raise ValueError("K and B must be at least 1")
        if self.train_hours < 1 or self.test_hours < 1:
            raise ValueError("need at least one training and one test hour")
        bad = set(self.strategies) - set(TAGS)
        if bad or not self.strategies:
            raise ValueError(f"unknown strategies {sorted(bad)}")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")

    @property
    def options(self) -> OpfOptions:
        return OpfOptions(self.sides, self.tol, self.max_iter)


_LISTS = {"etas": float, "strategies": str}
_SCALARS = {"system": str, "seed": int, "train_hours": int, "test_hours": int, "k": int,
            "blocks": int, "out": str, "sides": int, "tol": float, "max_iter": int, "horizon": int,
            "workers": int}


def parse_config(path) -> ExperimentConfig:
    """Read a ``key=value`` experiment file. Lists are comma separated."""
    raw = read_config(path)
    kw = {}
    for key, value in raw.items():
        key = {"K": "k", "B": "blocks"}.get(key, key)
        if key in _LISTS:
            kw[key] = tuple(_LISTS[key](v.strip()) for v in value.split(",") if v.strip())
        elif key in _SCALARS:
            kw[key] = _SCALARS[key](value)
        elif key in ScenarioConfig.__dataclass_fields__:
            continue  # scenario keys, see scenario_config
        else:
            raise ValueError(f"{path}: unknown key {key!r}")
    return ExperimentConfig(**kw)


def scenario_config(path) -> ScenarioConfig:
    """Scenario parameters found in a ``key=value`` file; other keys are ignored."""
    raw = read_config(path)
    fields = ScenarioConfig.__dataclass_fields__
    kw = {}
    for key, value in raw.items():
        if key in fields:
            kw[key] = int(value) if key == "horizon" else float(value)
    return ScenarioConfig(**kw)


def split_hours(horizon: int, n_train: int, n_test: int, seed: int):
    """Disjoint, sorted training and test hour sets drawn without replacement."""
    if n_train + n_test > horizon:
        raise ValueError(f"{n_train} + {n_test} hours do not fit in a horizon of {horizon}")
    perm = np.random.default_rng(seed).permutation(horizon)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_test])


def build_history(system: PowerSystem, hours, opts: OpfOptions = OpfOptions(),
                  features=CONTEXT_FEATURES) -> dict[str, History]:
    """Solve the full-network clearing for each hour and record (context, price, intake) per DN.

    Hours whose clearing fails are skipped with a warning.
    """
    records = {dn.id: [] for dn in system.dns()}
    for t in hours:
        t = int(t)
        if not 0 <= t < system.horizon:
            raise ValueError(f"hour {t} outside horizon {system.horizon}")
        try:
            cl = clear_market(Strategy("BN"), system, t, opts=opts)
        except SolverError as exc:
            log.warning("history: skipping hour %d (%s)", t, exc)
            continue
        for host, dn in sorted(system.distribution.items()):
            ctx = dn_context(system, host, t, features)
            records[dn.id].append(HistoryRecord(t, dn.id, tuple(ctx), cl.prices[host],
                                                cl.forecast[host]))
    return {dn: History.from_records(r, features) for dn, r in records.items() if r}


def _eval_task(args):
    tags, system, t, histories, cfg = args
    out = []
    for tag in tags:
        out.append(evaluate_hour(Strategy(tag, cfg.k, cfg.blocks), system, t, histories,
                                 cfg.options))
    return out


def _rows(reports, eta, sw_bn):
    rows = []
    for r in reports:
        rows.append(dict(hour=r.hour, strategy=r.strategy, eta=eta, delta_pct=r.delta_pct,
                         sw_total=r.sw_total, sw_t=r.sw_t, sw_d=r.sw_d, sw_bn=sw_bn[r.hour],
                         forecast_mw=r.forecast_mw, actual_mw=r.actual_mw, slack_mw=r.slack_mw,
                         flex_forecast_pct=r.flex_forecast_pct,
                         flex_observed_pct=r.flex_observed_pct, sw_t_free=r.sw_t_free,
                         seconds=r.seconds))
    return rows


def _dn_rows(reports, eta):
    return [dict(hour=r.hour, strategy=r.strategy, eta=eta, host=h, price=r.prices[h],
                 forecast_mw=r.forecast[h], actual_mw=r.actual[h], delta_pct=r.dn_delta_pct[h])
            for r in reports for h in sorted(r.actual)]


def run_experiment(cfg: ExperimentConfig, system: PowerSystem | None = None,
                   scenario: ScenarioConfig | None = None):
    """Run the impedance sweep; returns ``(reports, summary, dn_reports)`` data frames.

    BN is always evaluated since it is the welfare reference. When ``cfg.out``
    is set, ``reports.csv``, ``summary.csv`` and ``dn_reports.csv`` are written there.
    """
    if system is None:
        if cfg.system:
            system = load_system(cfg.system)
        else:
            scenario = scenario or ScenarioConfig(horizon=cfg.horizon)
            system = generate_scenario(scenario, cfg.seed)
    train, test = split_hours(system.horizon, cfg.train_hours, cfg.test_hours, cfg.seed)
    tags = ("BN",) + tuple(s for s in TAGS if s in cfg.strategies and s != "BN")
    needs_history = any(Strategy(s).needs_history for s in tags)

    rows, dn_rows = [], []
    pool = ProcessPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for eta in cfg.etas:
            sys_eta = scale_impedances(system, eta)
            start = time.perf_counter()
            hist = build_history(sys_eta, train, cfg.options) if needs_history else None
            log.info("eta=%g: history of %d hours in %.1f s", eta, len(train),
                     time.perf_counter() - start)
            tasks = [(tags, sys_eta, int(t), hist, cfg) for t in test]
            try:
                results = list(pool.map(_eval_task, tasks)) if pool else [_eval_task(a) for a in tasks]
            except SolverError as exc:
                raise SolverError(f"eta={eta}: {exc}") from exc
            reports = [r for hour in results for r in hour]
            sw_bn = {r.hour: r.sw_total for r in reports if r.strategy == "BN"}
            rows += _rows(reports, eta, sw_bn)
            dn_rows += _dn_rows(reports, eta)
    finally:
        if pool:
            pool.shutdown()

    reports = pd.DataFrame(rows, columns=list(REPORT_COLUMNS))
    reports = reports.sort_values(["eta", "strategy", "hour"], kind="stable",
                                  key=lambda s: s.map(TAGS.index) if s.name == "strategy" else s)
    reports = reports.reset_index(drop=True)
    dn_reports = pd.DataFrame(dn_rows)
    summary = summarize(reports)
    if cfg.out:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        reports.to_csv(out / "reports.csv", index=False, float_format="%.17g")
        summary.to_csv(out / "summary.csv", index=False, float_format="%.17g")
        dn_reports.to_csv(out / "dn_reports.csv", index=False, float_format="%.17g")
    return reports, summary, dn_reports


# ---------------------------------------------------------------------------
# aggregation

def nearest_rank(values, q: float) -> float:
    v = np.asarray(values, dtype=float)
    v = v[~np.isnan(v)]
    if v.size == 0:
        return float("nan")
    return float(np.percentile(v, q, method="inverted_cdf"))


def _band(x):
    x = np.asarray(x, dtype=float)
    return float(np.nanmean(x)) if np.any(~np.isnan(x)) else float("nan"), nearest_rank(x, 5), nearest_rank(x, 95)


def welfare_loss_pct(df: pd.DataFrame, free: bool = False) -> pd.Series:
    sw = df["sw_d"] + df["sw_t_free"] if free else df["sw_total"]
    return 100.0 * (df["sw_bn"] - sw) / df["sw_bn"].abs()


def summarize(reports: pd.DataFrame) -> pd.DataFrame:
    """One row per (eta, strategy): bands of imbalance and welfare loss, shares, timing."""
    if reports.empty:
        raise ValueError("no reports to summarize")
    df = reports.copy()
    df["loss_pct"] = welfare_loss_pct(df)
    df["loss_free_pct"] = welfare_loss_pct(df, free=True)
    out = []
    for eta, grp in df.groupby("eta", sort=True):
        bn = grp[grp["strategy"] == "BN"].set_index("hour")
        bn_time = bn["seconds"].mean() if len(bn) else float("nan")
        present = [s for s in TAGS if s in set(grp["strategy"])]
        for s in present:
            g = grp[grp["strategy"] == s]
            d_mean, d5, d95 = _band(g["delta_pct"])
            l_mean, l5, l95 = _band(g["loss_pct"])
            if len(bn):
                ref = bn.loc[g["hour"]]
                tso = float(np.mean(100.0 * (ref["sw_t"].to_numpy() - g["sw_t"].to_numpy())
                                    / np.abs(ref["sw_total"].to_numpy())))
                dso = float(np.mean(100.0 * (ref["sw_d"].to_numpy() - g["sw_d"].to_numpy())
                                    / np.abs(ref["sw_total"].to_numpy())))
            else:
                tso = dso = float("nan")
            t_mean = g["seconds"].mean()
            out.append(dict(eta=eta, strategy=s, hours=len(g), delta_mean=d_mean, delta_p5=d5,
                            delta_p95=d95, loss_mean=l_mean, loss_p5=l5, loss_p95=l95,
                            loss_free_mean=g["loss_free_pct"].mean(), tso_share=tso, dso_share=dso,
                            flex_forecast_mean=g["flex_forecast_pct"].mean(),
                            flex_observed_mean=g["flex_observed_pct"].mean(),
                            slack_mean_mw=g["slack_mw"].mean(), time_mean_s=t_mean,
                            speedup_vs_bn=bn_time / t_mean if t_mean > 0 else float("nan")))
    return pd.DataFrame(out)


def report(reports_path, out_dir) -> dict[str, Path]:
    """Write plot-ready tables: ``imbalance.csv``, ``welfare_loss.csv``, ``flexibility.csv``."""
    df = pd.read_csv(reports_path)
    if df.empty:
        raise ValueError(f"{reports_path}: no report rows")
    missing = set(REPORT_COLUMNS[:13]) - set(df.columns)
    if missing:
        raise ValueError(f"{reports_path}: missing columns {sorted(missing)}")
    df["loss_pct"] = welfare_loss_pct(df)
    imb, loss, flex = [], [], []
    for (eta, s), g in df.groupby(["eta", "strategy"], sort=True):
        if s != "BN":
            imb.append((eta, s, *_band(g["delta_pct"])))
        loss.append((eta, s, *_band(g["loss_pct"])))
        flex.append((eta, s, g["flex_forecast_pct"].mean(), g["flex_observed_pct"].mean()))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    order = lambda d: d.sort_values(["eta", "strategy"], key=lambda c: c.map(
        lambda v: TAGS.index(v) if v in TAGS else len(TAGS)) if c.name == "strategy" else c)
    paths = {}
    for name, rows, cols in (
            ("imbalance", imb, ["eta", "strategy", "mean", "p5", "p95"]),
            ("welfare_loss", loss, ["eta", "strategy", "mean", "p5", "p95"]),
            ("flexibility", flex, ["eta", "strategy", "flex_forecast", "flex_observed"])):
        paths[name] = out / f"{name}.csv"
        order(pd.DataFrame(rows, columns=cols)).to_csv(paths[name], index=False, float_format="%.17g")
    return paths
