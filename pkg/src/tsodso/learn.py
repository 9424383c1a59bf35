"""Learning the price response of a distribution network from substation data.

Two stages: nearest neighbours in context space select comparable hours, and
a segmented isotonic regression turns their (price, intake) pairs into a
non-increasing step curve with a bounded number of blocks that can be
submitted to the market as a block bid.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

EUCLIDEAN = "euclidean"
HAMMING = "hamming"
DEFAULT_FEATURES = ("demand_mw", "solar_cf", "wind_cf")


@dataclass(frozen=True)
class HistoryRecord:
    hour: int
    dn: str
    context: tuple
    price: float
    intake: float


@dataclass
class History:
    """Observed (context, price, intake) triples of one distribution network."""

    dn: str
    hours: np.ndarray
    contexts: np.ndarray
    prices: np.ndarray
    intakes: np.ndarray
    feature_names: tuple = DEFAULT_FEATURES

    def __post_init__(self):
        self.hours = np.asarray(self.hours, dtype=int)
        self.contexts = np.atleast_2d(np.asarray(self.contexts, dtype=float))
        if self.contexts.shape[0] != self.hours.size and self.hours.size == self.contexts.shape[1]:
            self.contexts = self.contexts.T
        self.prices = np.asarray(self.prices, dtype=float)
        self.intakes = np.asarray(self.intakes, dtype=float)
        n = self.hours.size
        if self.contexts.shape[0] != n or self.prices.size != n or self.intakes.size != n:
            raise ValueError("history arrays have inconsistent lengths")
        if not (np.all(np.isfinite(self.contexts)) and np.all(np.isfinite(self.prices))
                and np.all(np.isfinite(self.intakes))):
            raise ValueError("history contains non-finite values")

    def __len__(self):
        return int(self.hours.size)

    @classmethod
    def from_records(cls, records, feature_names=DEFAULT_FEATURES) -> "History":
        records = list(records)
        if not records:
            raise ValueError("empty history")
        dns = {r.dn for r in records}
        if len(dns) != 1:
            raise ValueError("records from more than one DN")
        return cls(dns.pop(), [r.hour for r in records], [list(r.context) for r in records],
                   [r.price for r in records], [r.intake for r in records], tuple(feature_names))

    def records(self) -> list[HistoryRecord]:
        return [HistoryRecord(int(h), self.dn, tuple(map(float, c)), float(p), float(q))
                for h, c, p, q in zip(self.hours, self.contexts, self.prices, self.intakes)]


# ---------------------------------------------------------------------------
# nearest neighbours

def nearest_neighbors(history: History, context, k: int, metrics=None) -> np.ndarray:
    """Indices of the ``k`` records closest to ``context``.

    Continuous features are z-scored with the history's mean and standard
    deviation before the Euclidean distance; features flagged ``"hamming"``
    add one per mismatch. Ties are broken by ascending hour.
    """
    n = len(history)
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= K <= {n}, got K={k}")
    X = history.contexts
    q = np.asarray(context, dtype=float).ravel()
    if q.size != X.shape[1]:
        raise ValueError("context arity does not match history")
    metrics = tuple(metrics) if metrics is not None else (EUCLIDEAN,) * X.shape[1]
    ham = np.array([m == HAMMING for m in metrics])
    cont = ~ham
    d2 = np.zeros(n)
    if cont.any():
        # statistics in hour order so that the result ignores record order
        Xc = X[np.argsort(history.hours, kind="stable")][:, cont]
        mean = Xc.mean(axis=0)
        std = Xc.std(axis=0)
        flat = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
        if flat.any():
            warnings.warn("zero-variance context feature; using unit scale", RuntimeWarning,
                          stacklevel=2)
            std = np.where(flat, 1.0, std)
        Z = (X[:, cont] - mean) / std
        zq = (q[cont] - mean) / std
        d2 += ((Z - zq) ** 2).sum(axis=1)
    if ham.any():
        d2 += (X[:, ham] != q[ham]).sum(axis=1)
    order = np.lexsort((history.hours, d2))
    return order[:k]


def knn_forecast(history: History, context, k: int, metrics=None) -> float:
    idx = nearest_neighbors(history, context, k, metrics)
    return float(history.intakes[idx].mean())


# ---------------------------------------------------------------------------
# isotonic regression

def pava(targets, weights=None, increasing: bool = False) -> np.ndarray:
    """Weighted least-squares monotone fit by pooling adjacent violators.

    The fit is non-increasing by default, non-decreasing with ``increasing=True``.
    """
    y = np.asarray(targets, dtype=float).ravel()
    if y.size == 0:
        raise ValueError("empty input")
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float).ravel()
    if w.size != y.size:
        raise ValueError("targets and weights differ in length")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    sign = 1.0 if increasing else -1.0
    vals, wts, sizes = [], [], []
    for yi, wi in zip(sign * y, w):
        vals.append(yi)
        wts.append(wi)
        sizes.append(1)
        while len(vals) > 1 and vals[-2] > vals[-1]:
            v2, w2, n2 = vals.pop(), wts.pop(), sizes.pop()
            wsum = wts[-1] + w2
            vals[-1] = (vals[-1] * wts[-1] + v2 * w2) / wsum
            wts[-1] = wsum
            sizes[-1] += n2
    return sign * np.repeat(vals, sizes)


@dataclass(frozen=True)
class BidCurve:
    """Non-increasing step function of price.

    ``base`` is served for prices at or above the first breakpoint; block
    ``b`` (1-based) covers ``[price_{b+1}, price_b)`` with the cumulative
    quantity ``qty_b``. ``blocks`` holds ``(price_b, qty_b)`` pairs with
    decreasing prices and non-decreasing quantities.
    """

    base: float
    blocks: tuple = field(default_factory=tuple)

    def __post_init__(self):
        prices = [p for p, _ in self.blocks]
        qtys = [self.base] + [q for _, q in self.blocks]
        if any(a < b for a, b in zip(prices, prices[1:])):
            raise ValueError("breakpoint prices must be non-increasing")
        if any(a > b for a, b in zip(qtys, qtys[1:])):
            raise ValueError("block quantities must be non-decreasing")

    @property
    def levels(self) -> np.ndarray:
        return np.array([self.base] + [q for _, q in self.blocks])

    @property
    def breakpoints(self) -> np.ndarray:
        return np.array([p for p, _ in self.blocks])

    def __call__(self, price):
        return evaluate_curve(self, price)


def evaluate_curve(curve: BidCurve, price):
    levels = curve.levels
    bps = curve.breakpoints
    # number of breakpoints strictly above the price selects the block
    p = np.asarray(price, dtype=float)
    idx = np.searchsorted(-bps, -p, side="left") if bps.size else np.zeros(p.shape, dtype=int)
    out = levels[idx]
    return float(out) if np.ndim(out) == 0 else out


def _merge_prices(points):
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if pts.shape[0] == 0:
        raise ValueError("no points to fit")
    prices, inv = np.unique(pts[:, 0], return_inverse=True)
    w = np.bincount(inv).astype(float)
    s = np.bincount(inv, weights=pts[:, 1])
    # descending price order: levels must be non-decreasing along it
    return pts, prices[::-1], (s / w)[::-1], w[::-1]


def _curve_from_segments(prices, y, w, cuts):
    """Build the curve for segments split before the indices in ``cuts``."""
    bounds = [0, *cuts, len(prices)]
    seg_w = np.array([w[a:b].sum() for a, b in zip(bounds, bounds[1:])])
    seg_m = np.array([(w[a:b] * y[a:b]).sum() for a, b in zip(bounds, bounds[1:])]) / seg_w
    levels = pava(seg_m, seg_w, increasing=True)
    base = float(levels[0])
    blocks = []
    scale = 1e-12 * max(1.0, float(np.abs(levels).max()))
    last = base
    for s in range(1, len(levels)):
        if levels[s] - last <= scale:
            continue
        cut = bounds[s]
        blocks.append((float(0.5 * (prices[cut - 1] + prices[cut])), float(levels[s])))
        last = float(levels[s])
    return BidCurve(base, tuple(blocks))


def curve_sse(curve: BidCurve, points) -> float:
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    return float(((pts[:, 1] - evaluate_curve(curve, pts[:, 0])) ** 2).sum())


def fit_step_curve(points, max_blocks: int) -> BidCurve:
    """Globally least-squares non-increasing step curve with at most ``max_blocks`` blocks.

    Dynamic program over price-sorted prefixes: ``F[k, i, j]`` is the best
    error for the first ``j + 1`` distinct prices split into ``k + 1``
    segments, the last spanning ``i..j``. A predecessor segment is admissible
    only if its mean does not exceed the last segment's mean, which is what
    an optimal monotone fit looks like once equal neighbouring levels are
    pooled.
    """
    if max_blocks < 1:
        raise ValueError("need at least one block")
    _, prices, y, w = _merge_prices(points)
    n = prices.size
    cw = np.concatenate([[0.0], np.cumsum(w)])
    cs = np.concatenate([[0.0], np.cumsum(w * y)])
    cq = np.concatenate([[0.0], np.cumsum(w * y * y)])
    ii, jj = np.triu_indices(n)
    W = np.full((n, n), np.nan)
    W[ii, jj] = cw[jj + 1] - cw[ii]
    S = np.full((n, n), np.nan)
    S[ii, jj] = cs[jj + 1] - cs[ii]
    mean = S / W
    sse = np.full((n, n), np.inf)
    sse[ii, jj] = np.maximum(cq[jj + 1] - cq[ii] - S[ii, jj] ** 2 / W[ii, jj], 0.0)
    eps = 1e-12 * max(1.0, float(np.abs(y).max()))

    segs = min(max_blocks + 1, n)
    F = np.full((segs, n, n), np.inf)
    arg = np.full((segs, n, n), -1, dtype=int)
    F[0, 0, :] = sse[0, :]
    for k in range(1, segs):
        prev = F[k - 1]
        for i in range(k, n):
            cand = prev[:i, i - 1]
            ok = np.isfinite(cand)
            if not ok.any():
                continue
            hs = np.nonzero(ok)[0]
            keys = mean[hs, i - 1]
            order = np.argsort(keys, kind="stable")
            keys, hs = keys[order], hs[order]
            vals = cand[hs]
            run = np.minimum.accumulate(vals)
            pos = np.maximum.accumulate(np.where(vals == run, np.arange(vals.size), 0))
            js = np.arange(i, n)
            lim = np.searchsorted(keys, mean[i, js] + eps, side="right") - 1
            good = lim >= 0
            F[k, i, js[good]] = sse[i, js[good]] + run[lim[good]]
            arg[k, i, js[good]] = hs[pos[lim[good]]]

    last = F[:, :, n - 1]
    k, i = np.unravel_index(np.argmin(last), last.shape)
    cuts = []
    j = n - 1
    while k > 0:
        cuts.append(int(i))
        h = arg[k, i, j]
        j, i, k = i - 1, h, k - 1
    return _curve_from_segments(prices, y, w, sorted(cuts))


def brute_force_step_fit(points, max_blocks: int, max_points: int = 14) -> BidCurve:
    """Exhaustive search over contiguous segmentations; reference for :func:`fit_step_curve`."""
    pts, prices, y, w = _merge_prices(points)
    if pts.shape[0] > max_points:
        raise ValueError(f"brute force limited to {max_points} points")
    if max_blocks < 1:
        raise ValueError("need at least one block")
    n = prices.size
    best, best_sse = None, np.inf
    for k in range(0, min(max_blocks, n - 1) + 1):
        for cuts in itertools.combinations(range(1, n), k):
            curve = _curve_from_segments(prices, y, w, list(cuts))
            err = curve_sse(curve, pts)
            if err < best_sse:
                best, best_sse = curve, err
    return best


def learn_bid(history: History, context, k: int, max_blocks: int, metrics=None) -> BidCurve:
    idx = nearest_neighbors(history, context, k, metrics)
    return fit_step_curve(np.column_stack([history.prices[idx], history.intakes[idx]]), max_blocks)


# ---------------------------------------------------------------------------
# files

def write_history(histories, path) -> None:
    """Write ``history.csv``: hour, dn_id, feature_1..feature_F, lambda, p_n."""
    frames = []
    for h in histories:
        df = pd.DataFrame({"hour": h.hours, "dn_id": h.dn})
        for f in range(h.contexts.shape[1]):
            df[f"feature_{f + 1}"] = h.contexts[:, f]
        df["lambda"] = h.prices
        df["p_n"] = h.intakes
        frames.append(df)
    pd.concat(frames, ignore_index=True).to_csv(path, index=False, float_format="%.17g")


def read_history(path, feature_names=DEFAULT_FEATURES) -> dict[str, History]:
    df = pd.read_csv(path, dtype={"dn_id": str}, float_precision="round_trip")
    feats = [c for c in df.columns if c.startswith("feature_")]
    feats.sort(key=lambda c: int(c.split("_")[1]))
    names = tuple(feature_names) if len(feature_names) == len(feats) else tuple(feats)
    out = {}
    for dn, grp in df.groupby("dn_id", sort=True):
        out[dn] = History(dn, grp["hour"].to_numpy(), grp[feats].to_numpy(),
                          grp["lambda"].to_numpy(), grp["p_n"].to_numpy(), names)
    return out


def write_bids(curves: dict, path) -> None:
    """Write ``bids.csv`` from ``{(dn_id, hour): BidCurve}``."""
    rows = []
    for (dn, hour), curve in sorted(curves.items()):
        rows.append((dn, hour, 0, "", curve.base))
        for b, (price, qty) in enumerate(curve.blocks, start=1):
            rows.append((dn, hour, b, price, qty))
    pd.DataFrame(rows, columns=["dn_id", "hour", "level_index", "breakpoint_price",
                                "cumulative_mw"]).to_csv(path, index=False, float_format="%.17g")


def read_bids(path) -> dict:
    df = pd.read_csv(path, dtype={"dn_id": str}, float_precision="round_trip")
    out = {}
    for (dn, hour), grp in df.groupby(["dn_id", "hour"], sort=True):
        grp = grp.sort_values("level_index")
        base = float(grp["cumulative_mw"].iloc[0])
        blocks = tuple(zip(grp["breakpoint_price"].iloc[1:].astype(float),
                           grp["cumulative_mw"].iloc[1:].astype(float)))
        out[(dn, int(hour))] = BidCurve(base, blocks)
    return out
