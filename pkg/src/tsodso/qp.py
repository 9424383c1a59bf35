"""Convex quadratic programming with duals.

Problems are stated as::

    minimize    1/2 x'Qx + c'x + const
    subject to  A_eq x  = b_eq        (duals nu)
                A_in x <= b_in        (duals mu >= 0)
                lb <= x <= ub         (signed bound duals w)

and solved with a primal-dual path-following interior point method using
Mehrotra's predictor-corrector. At an optimum the multipliers satisfy
``Qx + c + A_eq' nu + A_in' mu + w = 0``, so the derivative of the optimal
value with respect to ``b_eq`` is ``-nu``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
ITERATION_LIMIT = "iteration-limit"

DENSE_LIMIT = 2500  # KKT dimension above which a sparse LU is used


def _csr(m, rows, cols):
    if m is None:
        return sp.csr_matrix((rows, cols))
    return sp.csr_matrix(m, dtype=float).reshape(rows, cols) if not sp.issparse(m) else m.tocsr()


@dataclass
class QuadraticProgram:
    Q: sp.spmatrix
    c: np.ndarray
    A_eq: sp.spmatrix | None = None
    b_eq: np.ndarray | None = None
    A_in: sp.spmatrix | None = None
    b_in: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    eq_labels: list = field(default_factory=list)
    in_labels: list = field(default_factory=list)
    const: float = 0.0

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        n = self.c.size
        self.Q = _csr(self.Q, n, n)
        self.b_eq = np.zeros(0) if self.b_eq is None else np.asarray(self.b_eq, float).ravel()
        self.b_in = np.zeros(0) if self.b_in is None else np.asarray(self.b_in, float).ravel()
        self.A_eq = _csr(self.A_eq, self.b_eq.size, n)
        self.A_in = _csr(self.A_in, self.b_in.size, n)
        self.lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, float).ravel()
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, float).ravel()
        if self.Q.shape != (n, n) or self.lb.size != n or self.ub.size != n:
            raise ValueError("inconsistent problem dimensions")
        if self.A_eq.shape != (self.b_eq.size, n) or self.A_in.shape != (self.b_in.size, n):
            raise ValueError("inconsistent constraint dimensions")
        if np.any(self.lb > self.ub):
            raise ValueError("lower bound above upper bound")
        if abs(self.Q - self.Q.T).max() > 1e-12 * max(1.0, abs(self.Q).max()):
            raise ValueError("Q must be symmetric")
        if 0 < n <= 60:
            eig = np.linalg.eigvalsh(self.Q.toarray())
            if eig[0] < -1e-9 * max(1.0, abs(eig).max()):
                raise ValueError("Q must be positive semidefinite")

    @property
    def n(self) -> int:
        return self.c.size

    def objective(self, x) -> float:
        return float(0.5 * x @ (self.Q @ x) + self.c @ x + self.const)


@dataclass
class QpSolution:
    status: str
    x: np.ndarray
    objective: float
    eq_duals: np.ndarray
    in_duals: np.ndarray
    bound_duals: np.ndarray
    iterations: int = 0
    residuals: tuple = (math.inf, math.inf, math.inf)

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def kkt_residuals(qp: QuadraticProgram, sol: QpSolution) -> tuple[float, float, float]:
    """Relative infinity-norm (primal, dual, complementarity) residuals of ``sol``."""
    x, nu, mu, w = sol.x, sol.eq_duals, sol.in_duals, sol.bound_duals
    if x.size != qp.n or nu.size != qp.b_eq.size or mu.size != qp.b_in.size or w.size != qp.n:
        raise ValueError("solution does not match problem dimensions")
    inf = lambda v: float(np.max(np.abs(v))) if v.size else 0.0
    fin_lb, fin_ub = np.isfinite(qp.lb), np.isfinite(qp.ub)

    bound_scale = 1.0 + max(inf(qp.lb[fin_lb]), inf(qp.ub[fin_ub]))
    primal = max(
        inf(qp.A_eq @ x - qp.b_eq) / (1.0 + inf(qp.b_eq)),
        inf(np.maximum(qp.A_in @ x - qp.b_in, 0.0)) / (1.0 + inf(qp.b_in)),
        inf(np.concatenate([np.maximum(qp.lb[fin_lb] - x[fin_lb], 0.0),
                            np.maximum(x[fin_ub] - qp.ub[fin_ub], 0.0)])) / bound_scale,
    )
    grad = qp.Q @ x + qp.c + qp.A_eq.T @ nu + qp.A_in.T @ mu + w
    wrong_sign = np.concatenate([np.minimum(mu, 0.0), np.where(fin_ub, 0.0, np.maximum(w, 0.0)),
                                 np.where(fin_lb, 0.0, np.minimum(w, 0.0))])
    dual = max(inf(grad), inf(wrong_sign)) / (1.0 + inf(qp.c))

    w_up, w_lo = np.maximum(w, 0.0), np.maximum(-w, 0.0)
    gaps = np.concatenate([
        mu * (qp.b_in - qp.A_in @ x),
        np.where(fin_ub, w_up * (np.where(fin_ub, qp.ub, 0.0) - x), 0.0),
        np.where(fin_lb, w_lo * (x - np.where(fin_lb, qp.lb, 0.0)), 0.0),
    ])
    comp = inf(gaps) / (1.0 + abs(qp.objective(x)))
    return primal, dual, comp


class _Kkt:
    """Factorization of the reduced system [[H, A'], [A, -reg I]]."""

    def __init__(self, H, A, reg):
        n, m = H.shape[0], A.shape[0]
        self.n = n
        self.sparse = n + m > DENSE_LIMIT
        if self.sparse:
            K = sp.bmat([[H + reg * sp.identity(n), A.T], [A, -reg * sp.identity(m)]], format="csc")
            self.K0 = sp.bmat([[H, A.T], [A, None]], format="csr")
            self._lu = spla.splu(K)
            self._solve = self._lu.solve
        else:
            Hd = H.toarray() if sp.issparse(H) else H
            Ad = A.toarray()
            K0 = np.block([[Hd, Ad.T], [Ad, np.zeros((m, m))]])
            self.K0 = K0
            K = K0.copy()
            K[np.diag_indices(n)] += reg
            idx = np.arange(n, n + m)
            K[idx, idx] -= reg
            self._lu = sla.lu_factor(K, check_finite=False)
            self._solve = lambda r: sla.lu_solve(self._lu, r, check_finite=False)

    def solve(self, rhs, refine=3):
        sol = self._solve(rhs)
        for _ in range(refine):
            res = rhs - self.K0 @ sol
            sol = sol + self._solve(res)
        return sol[: self.n], sol[self.n:]


def solve(qp: QuadraticProgram, tol: float = 1e-8, max_iter: int = 100) -> QpSolution:
    """Solve ``qp``; never raises on infeasible or unbounded input, reports a status instead."""
    n = qp.n
    fixed = np.isfinite(qp.lb) & (qp.lb == qp.ub)
    lo = np.isfinite(qp.lb) & ~fixed
    hi = np.isfinite(qp.ub) & ~fixed
    eye = sp.identity(n, format="csr")
    A = sp.vstack([qp.A_eq, eye[fixed]], format="csr")
    b = np.concatenate([qp.b_eq, qp.lb[fixed]])
    G = sp.vstack([qp.A_in, -eye[lo], eye[hi]], format="csr")
    h = np.concatenate([qp.b_in, -qp.lb[lo], qp.ub[hi]])
    Q, c = qp.Q, qp.c
    m = G.shape[0]

    def unpack(x, y, z, status, it, res):
        nu = y[: qp.b_eq.size]
        m_in = qp.b_in.size
        mu = z[:m_in]
        w = np.zeros(n)
        w[fixed] = y[qp.b_eq.size:]
        w[lo] -= z[m_in: m_in + lo.sum()]
        w[hi] += z[m_in + lo.sum():]
        return QpSolution(status, x, qp.objective(x), nu.copy(), mu.copy(), w, it, res)

    nb = 1.0 + max(np.abs(b).max(initial=0.0), np.abs(h).max(initial=0.0))
    nc = 1.0 + np.abs(c).max(initial=0.0)
    reg = 1e-9

    # Starting point: least-squares solve with unit scaling, then shift into the interior.
    kkt = _Kkt(Q + G.T @ G, A, reg)
    x, y = kkt.solve(np.concatenate([-c + G.T @ h, b]))
    s = h - G @ x
    z = -s.copy()
    if m:
        s = s + max(0.0, 1.0 - s.min())
        z = z + max(0.0, 1.0 - z.min())

    best = None
    it = 0
    for it in range(max_iter + 1):
        Qx = Q @ x
        r_d = Qx + c + A.T @ y + G.T @ z
        r_p = A @ x - b
        r_i = G @ x + s - h
        gap = float(s @ z)
        obj = float(0.5 * x @ Qx + c @ x)
        pres = max(np.abs(r_p).max(initial=0.0), np.abs(r_i).max(initial=0.0)) / nb
        dres = np.abs(r_d).max(initial=0.0) / nc
        cres = (np.abs(s * z).max(initial=0.0)) / (1.0 + abs(obj))
        res = (pres, dres, cres)
        if best is None or max(res) < max(best[4]):
            best = (x.copy(), y.copy(), z.copy(), it, res)
        if pres <= tol and dres <= tol and cres <= tol:
            polished = _polish(Q, c, A, b, G, h, x, y, z, s, nb, nc, res, reg)
            if polished is not None:
                x, y, z, res = polished
            return unpack(x, y, z, OPTIMAL, it, res)
        status = _certificate(Q, c, A, b, G, h, x, y, z, pres, dres)
        if status is not None or it == max_iter:
            break

        d = z / s
        H = Q + G.T @ sp.diags(d) @ G
        try:
            kkt = _Kkt(H, A, reg)
        except (np.linalg.LinAlgError, RuntimeError, ValueError):
            status = ITERATION_LIMIT
            break

        def newton(r_c):
            rhs_x = -r_d - G.T @ (d * r_i - r_c / s)
            dx, dy = kkt.solve(np.concatenate([rhs_x, -r_p]))
            dz = d * (G @ dx + r_i) - r_c / s
            ds = -r_i - G @ dx
            return dx, dy, dz, ds

        mu_k = gap / m if m else 0.0
        dx, dy, dz, ds = newton(s * z)
        a_aff = min(_max_step(s, ds), _max_step(z, dz))
        if m:
            mu_aff = float((s + a_aff * ds) @ (z + a_aff * dz)) / m
            sigma = (mu_aff / mu_k) ** 3 if mu_k > 0 else 0.0
            dx, dy, dz, ds = newton(s * z + ds * dz - sigma * mu_k)
        alpha = min(1.0, 0.99 * min(_max_step(s, ds), _max_step(z, dz)))
        x, y, z, s = x + alpha * dx, y + alpha * dy, z + alpha * dz, s + alpha * ds
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(z))):
            status = ITERATION_LIMIT
            break
    else:  # pragma: no cover
        status = ITERATION_LIMIT

    if status in (INFEASIBLE, UNBOUNDED):
        return unpack(x, y, z, status, it, best[4])
    bx, by, bz, bit, bres = best
    return unpack(bx, by, bz, ITERATION_LIMIT, it, bres)


def _residuals(Q, c, A, b, G, h, x, y, z, s, nb, nc):
    Qx = Q @ x
    obj = float(0.5 * x @ Qx + c @ x)
    pres = max(np.abs(A @ x - b).max(initial=0.0), np.abs(G @ x + s - h).max(initial=0.0)) / nb
    dres = np.abs(Qx + c + A.T @ y + G.T @ z).max(initial=0.0) / nc
    cres = np.abs(s * z).max(initial=0.0) / (1.0 + abs(obj))
    return pres, dres, cres


def _polish(Q, c, A, b, G, h, x, y, z, s, nb, nc, res, reg, passes=20):
    """Re-solve the KKT system on a guessed active set; keep the result only if it is no worse.

    The guess starts from ``s < z`` and is corrected by dropping constraints
    with negative multipliers and adding violated ones until it is consistent.
    Each solve adds a small proximal term around the interior point iterate
    so that directions the objective does not see (free reactive power, say)
    stay where the iterate put them; a few proximal sweeps remove its bias.
    """
    me = A.shape[0]
    active = s < z
    rho = 1e-6 * (1.0 + (abs(Q).max() if Q.nnz else 0.0))
    prox = rho * sp.identity(Q.shape[0], format="csr")
    tried = set()
    for _ in range(passes):
        key = active.tobytes()
        if key in tried:
            return None
        tried.add(key)
        C = sp.vstack([A, G[active]], format="csr")
        rhs = np.concatenate([b, h[active]])
        try:
            kkt = _Kkt(Q + prox, C, reg)
            px = x
            for _sweep in range(4):
                px, yz = kkt.solve(np.concatenate([-c + rho * px, rhs]))
        except (np.linalg.LinAlgError, RuntimeError, ValueError):
            return None
        if not (np.all(np.isfinite(px)) and np.all(np.isfinite(yz))):
            return None
        za = yz[me:]
        slack = h - G @ px
        scale = 1e-12 * (1.0 + np.abs(za).max(initial=0.0))
        neg = za < -scale
        viol = (~active) & (slack < -1e-12 * nb)
        if not neg.any() and not viol.any():
            break
        idx = np.flatnonzero(active)
        active = active.copy()
        active[idx[neg]] = False
        active[viol] = True
    else:
        return None
    py = yz[:me]
    pz = np.zeros_like(z)
    pz[active] = np.maximum(za, 0.0)
    ps = np.maximum(slack, 0.0)
    pres = _residuals(Q, c, A, b, G, h, px, py, pz, ps, nb, nc)
    if max(pres) <= max(res):
        return px, py, pz, pres
    return None


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def _certificate(Q, c, A, b, G, h, x, y, z, pres, dres):
    """Detect a Farkas-type certificate emerging from diverging iterates."""
    ymax = max(np.abs(y).max(initial=0.0), np.abs(z).max(initial=0.0))
    if ymax > 1e6 and pres > 1e-6:
        yh, zh = y / ymax, z / ymax
        lhs = np.abs(A.T @ yh + G.T @ zh).max(initial=0.0)
        if lhs < 1e-6 and float(b @ yh + h @ zh) < -1e-6:
            return INFEASIBLE
    xmax = np.abs(x).max(initial=0.0)
    if xmax > 1e6 and dres > 1e-6:
        xh = x / xmax
        if (np.abs(Q @ xh).max(initial=0.0) < 1e-6 and np.abs(A @ xh).max(initial=0.0) < 1e-6
                and (G @ xh).max(initial=0.0) < 1e-6 and float(c @ xh) < -1e-6):
            return UNBOUNDED
    return None


def polygonize_disk(rating: float, sides: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Inner polygonal approximation of the disk ``p^2 + q^2 <= rating^2``.

    Returns ``(normals, rhs)`` with one row ``(cos phi_k, sin phi_k)`` per side so
    that ``normals @ [p, q] <= rhs`` describes the inscribed regular polygon
    with vertices at angles ``2 pi k / sides``.
    """
    if sides < 4 or sides % 2:
        raise ValueError("polygon needs an even number of sides >= 4")
    if rating < 0:
        raise ValueError("rating must be non-negative")
    phi = (2 * np.arange(sides) + 1) * np.pi / sides
    normals = np.column_stack([np.cos(phi), np.sin(phi)])
    return normals, np.full(sides, rating * np.cos(np.pi / sides))
