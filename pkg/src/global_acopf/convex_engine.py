"""Convex subproblem solver.

Every subproblem the algorithms need (bound LPs, the linearized QP inside
FSLP, the secant relaxation at a branch-and-bound node) is a convex program
with a quadratic objective, linear rows and a few convex quadratic rows.
They are converted to a cone program over the nonnegative orthant and
second-order cones and solved with a homogeneous self-dual interior point
method (Nesterov-Todd scaling, Mehrotra predictor-corrector).

Other backends can be plugged in through :func:`register_backend`; the
reference engine never needs anything beyond numpy/scipy.
"""
from __future__ import annotations

import enum
import math
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

_log = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, sp.spmatrix, Sequence[Sequence[float]]]


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    ITER_LIMIT = "IterLimit"
    NUMERICAL = "Numerical"


class EngineError(RuntimeError):
    """Raised when a backend cannot return a usable answer."""


@dataclass
class SquaredNormRow:
    """``||P x + p0||^2 <= q.x + q0``.

    ``scale`` is a rough magnitude of ``sqrt(q.x + q0)`` at the solution; it
    only balances the cone encoding and never changes the feasible set.
    """

    P: np.ndarray
    p0: np.ndarray
    q: np.ndarray
    q0: float
    scale: float = 1.0


@dataclass
class QuadFormRow:
    """``x'Hx + h.x <= h0`` with H positive semidefinite."""

    H: np.ndarray
    h: np.ndarray
    h0: float


@dataclass
class SOCRow:
    """``||P x + p0|| <= q.x + q0`` (a plain second-order cone row)."""

    P: np.ndarray
    p0: np.ndarray
    q: np.ndarray
    q0: float


QuadRow = Union[SquaredNormRow, QuadFormRow, SOCRow]


def _dense(m, shape=None) -> np.ndarray:
    if m is None:
        return np.zeros(shape if shape is not None else (0, 0))
    if sp.issparse(m):
        return m.toarray()
    out = np.asarray(m, dtype=float)
    if shape is not None and out.size == 0:
        return np.zeros(shape)
    return out


@dataclass
class ConvexProgram:
    """minimize ``x'Qx + lin.x + const`` over linear and convex quadratic rows.

    ``a_ub x <= b_ub``, ``a_eq x = b_eq``, ``lo <= x <= hi`` (infinite bounds
    allowed) and every entry of ``quad_rows``.
    """

    lin: np.ndarray
    q_mat: Optional[ArrayLike] = None
    a_ub: Optional[ArrayLike] = None
    b_ub: Optional[np.ndarray] = None
    a_eq: Optional[ArrayLike] = None
    b_eq: Optional[np.ndarray] = None
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None
    quad_rows: list = field(default_factory=list)
    const: float = 0.0
    # precomputed R with R'R = q_mat; saves an eigendecomposition per solve
    q_factor: Optional[np.ndarray] = None

    def __post_init__(self):
        self.lin = np.asarray(self.lin, dtype=float).ravel()
        n = self.lin.size
        if self.a_ub is None:
            self.a_ub = np.zeros((0, n))
            self.b_ub = np.zeros(0)
        if self.a_eq is None:
            self.a_eq = np.zeros((0, n))
            self.b_eq = np.zeros(0)
        self.a_ub = _dense(self.a_ub).reshape(-1, n)
        self.a_eq = _dense(self.a_eq).reshape(-1, n)
        self.b_ub = np.asarray(self.b_ub, dtype=float).ravel()
        self.b_eq = np.asarray(self.b_eq, dtype=float).ravel()
        self.lo = np.full(n, -np.inf) if self.lo is None else np.asarray(self.lo, dtype=float).copy()
        self.hi = np.full(n, np.inf) if self.hi is None else np.asarray(self.hi, dtype=float).copy()
        if self.a_ub.shape != (self.b_ub.size, n) or self.a_eq.shape != (self.b_eq.size, n):
            raise ValueError("row blocks do not match the number of variables")
        if self.lo.size != n or self.hi.size != n:
            raise ValueError("bound vectors do not match the number of variables")

    @property
    def n(self) -> int:
        return self.lin.size

    def objective(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float)
        val = float(self.lin @ x) + self.const
        if self.q_factor is not None:
            v = np.asarray(self.q_factor) @ x
            val += float(v @ v)
        elif self.q_mat is not None:
            val += float(x @ (self.q_mat @ x))
        return val

    def max_violation(self, x: np.ndarray) -> float:
        """Largest constraint violation at ``x`` (0 when feasible)."""
        x = np.asarray(x, dtype=float)
        viol = [0.0]
        if self.b_ub.size:
            viol.append(float(np.max(self.a_ub @ x - self.b_ub)))
        if self.b_eq.size:
            viol.append(float(np.max(np.abs(self.a_eq @ x - self.b_eq))))
        viol.append(float(np.max(self.lo - x, initial=0.0)))
        viol.append(float(np.max(x - self.hi, initial=0.0)))
        for row in self.quad_rows:
            if isinstance(row, SquaredNormRow):
                v = np.asarray(row.P) @ x + row.p0
                viol.append(float(v @ v - row.q @ x - row.q0))
            elif isinstance(row, SOCRow):
                viol.append(float(np.linalg.norm(np.asarray(row.P) @ x + row.p0) - row.q @ x - row.q0))
            else:
                viol.append(float(x @ (np.asarray(row.H) @ x) + row.h @ x - row.h0))
        return max(viol)


@dataclass
class SolveStatus:
    status: Status
    primal: Optional[np.ndarray]
    obj: float
    kkt_residual: float
    dual_bound: float = -np.inf
    iterations: int = 0
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status is Status.OPTIMAL


# --------------------------------------------------------------------------
# cone program in standard form
#   min c.x  s.t.  G x + s = h,  s in K,  A x = b
# K = R^l_+ x Q^{q_1} x ... x Q^{q_k}
# --------------------------------------------------------------------------


@dataclass
class _Cone:
    """min 1/2 x'Px + c.x  s.t.  G x + s = h, s in K,  A x = b."""

    P: Optional[np.ndarray]
    c: np.ndarray
    G: np.ndarray
    h: np.ndarray
    A: np.ndarray
    b: np.ndarray
    l: int
    q: list  # sizes of the second-order cones, stacked after the orthant


def _psd_factor(Q: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """R with R'R = Q (rows for numerically positive eigenvalues only)."""
    Q = 0.5 * (Q + Q.T)
    w, U = np.linalg.eigh(Q)
    scale = max(1.0, float(np.max(np.abs(w), initial=0.0)))
    if w.size and w[0] < -1e-8 * scale:
        raise ValueError(f"matrix is not positive semidefinite (min eigenvalue {w[0]:.3e})")
    keep = w > tol * scale
    return (np.sqrt(w[keep])[:, None] * U[:, keep].T)


def _to_cone(prog: ConvexProgram) -> _Cone:
    n = prog.n
    if prog.q_factor is not None:
        R = np.asarray(prog.q_factor, dtype=float)
        P = 2.0 * (R.T @ R) if R.size else None
    elif prog.q_mat is not None:
        Q = _dense(prog.q_mat)
        Q = 0.5 * (Q + Q.T)
        if np.any(Q):
            wmin = float(np.linalg.eigvalsh(Q)[0])
            if wmin < -1e-8 * max(1.0, float(np.abs(Q).max())):
                raise ValueError(f"quadratic objective is not positive semidefinite (min eigenvalue {wmin:.3e})")
            P = 2.0 * Q
        else:
            P = None
    else:
        P = None

    eq_rows = [_dense(prog.a_eq, (0, n))]
    eq_rhs = [prog.b_eq]
    width = prog.hi - prog.lo
    fixed = np.isfinite(width) & (np.abs(width) <= 1e-12 * (1 + np.abs(prog.lo)))
    idx = np.flatnonzero(fixed)
    if idx.size:
        E = np.zeros((idx.size, n))
        E[np.arange(idx.size), idx] = 1.0
        eq_rows.append(E)
        eq_rhs.append(0.5 * (prog.lo[idx] + prog.hi[idx]))

    lin_rows = [_dense(prog.a_ub, (0, n))]
    lin_rhs = [prog.b_ub]
    up = np.flatnonzero(np.isfinite(prog.hi) & ~fixed)
    if up.size:
        E = np.zeros((up.size, n))
        E[np.arange(up.size), up] = 1.0
        lin_rows.append(E)
        lin_rhs.append(prog.hi[up])
    dn = np.flatnonzero(np.isfinite(prog.lo) & ~fixed)
    if dn.size:
        E = np.zeros((dn.size, n))
        E[np.arange(dn.size), dn] = -1.0
        lin_rows.append(E)
        lin_rhs.append(-prog.lo[dn])

    soc_G, soc_h, soc_q = [], [], []

    def add_sqnorm(Pm, p0, q, q0, a=1.0):
        # ||Pm x + p0||^2 <= w  <=>  (w/a + a, w/a - a, 2(Pm x + p0)) in SOC, w = q.x + q0
        Pm = _dense(Pm)
        k = Pm.shape[0]
        a = float(a) if a > 0 else 1.0
        Gb = np.zeros((k + 2, n))
        hb = np.zeros(k + 2)
        Gb[0] = -q / a
        Gb[1] = -q / a
        hb[0] = q0 / a + a
        hb[1] = q0 / a - a
        Gb[2:] = -2.0 * Pm
        hb[2:] = 2.0 * np.asarray(p0, dtype=float)
        soc_G.append(Gb)
        soc_h.append(hb)
        soc_q.append(k + 2)

    for row in prog.quad_rows:
        if isinstance(row, SquaredNormRow):
            add_sqnorm(np.asarray(row.P, float), np.asarray(row.p0, float), np.asarray(row.q, float),
                       float(row.q0), row.scale)
        elif isinstance(row, SOCRow):
            Pm = _dense(row.P)
            k = Pm.shape[0]
            Gb = np.zeros((k + 1, n))
            hb = np.zeros(k + 1)
            Gb[0] = -np.asarray(row.q, float)
            hb[0] = float(row.q0)
            Gb[1:] = -Pm
            hb[1:] = np.asarray(row.p0, float)
            soc_G.append(Gb)
            soc_h.append(hb)
            soc_q.append(k + 1)
        elif isinstance(row, QuadFormRow):
            Rh = _psd_factor(_dense(row.H))
            if Rh.shape[0] == 0:
                lin_rows.append(np.asarray(row.h, float)[None, :])
                lin_rhs.append(np.array([row.h0]))
            else:
                add_sqnorm(Rh, np.zeros(Rh.shape[0]), -np.asarray(row.h, float), float(row.h0))
        else:
            raise TypeError(f"unsupported quadratic row {type(row).__name__}")

    Gl = np.vstack(lin_rows)
    hl = np.concatenate(lin_rhs)
    G = np.vstack([Gl] + soc_G)
    h = np.concatenate([hl] + soc_h)
    return _Cone(P=P, c=prog.lin.copy(), G=G, h=h, A=np.vstack(eq_rows), b=np.concatenate(eq_rhs),
                 l=Gl.shape[0], q=soc_q)


# ----------------------------------------------------------- cone algebra


class _ConeOps:
    def __init__(self, l: int, q: Sequence[int]):
        self.l = l
        self.q = list(q)
        self.blocks = []
        off = l
        for k in self.q:
            self.blocks.append(slice(off, off + k))
            off += k
        self.m = off
        self.degree = l + len(self.q)
        self.e = np.zeros(self.m)
        self.e[:l] = 1.0
        for bl in self.blocks:
            self.e[bl.start] = 1.0

    def min_eig(self, u: np.ndarray) -> float:
        vals = [np.inf]
        if self.l:
            vals.append(float(np.min(u[: self.l])))
        for bl in self.blocks:
            v = u[bl]
            vals.append(float(v[0] - np.linalg.norm(v[1:])))
        return min(vals)

    def centrality(self, s, z, tau, kappa) -> float:
        """Smallest per-cone complementarity product relative to the mean mu."""
        mu = (s @ z + tau * kappa) / (self.degree + 1)
        if not mu > 0:
            return -np.inf
        vals = [tau * kappa]
        if self.l:
            vals.append(float(np.min(s[: self.l] * z[: self.l])))
        for bl in self.blocks:
            ds, dz = _soc_det(s[bl]), _soc_det(z[bl])
            if ds <= 0 or dz <= 0 or s[bl.start] <= 0 or z[bl.start] <= 0:
                return -np.inf
            # squared smallest eigenvalue of the NT point lam = W z: with
            # gamma^2 = (1 + sbar.zbar)/2 it is sqrt(ds dz) / (gamma + sqrt(gamma^2 - 1))^2
            sn, zn = np.sqrt(ds), np.sqrt(dz)
            g2 = max(0.5 * (1.0 + (s[bl] @ z[bl]) / (sn * zn)), 1.0)
            vals.append(sn * zn / (np.sqrt(g2) + np.sqrt(g2 - 1.0)) ** 2)
        return min(vals) / mu

    def jprod(self, u, v):
        out = np.empty_like(u)
        out[: self.l] = u[: self.l] * v[: self.l]
        for bl in self.blocks:
            a, b = u[bl], v[bl]
            out[bl.start] = a @ b
            out[bl.start + 1 : bl.stop] = a[0] * b[1:] + b[0] * a[1:]
        return out

    def jdiv(self, lam, d):
        """x with lam o x = d."""
        out = np.empty_like(d)
        out[: self.l] = d[: self.l] / lam[: self.l]
        for bl in self.blocks:
            a, b = lam[bl], d[bl]
            det = _soc_det(a)
            x0 = (a[0] * b[0] - a[1:] @ b[1:]) / det
            out[bl.start] = x0
            out[bl.start + 1 : bl.stop] = (b[1:] - x0 * a[1:]) / a[0]
        return out

    def max_step(self, u, du) -> float:
        alpha = np.inf
        if self.l:
            neg = du[: self.l] < 0
            if np.any(neg):
                alpha = min(alpha, float(np.min(-u[: self.l][neg] / du[: self.l][neg])))
        for bl in self.blocks:
            alpha = min(alpha, _soc_step(u[bl], du[bl]))
        return alpha


def _soc_det(u: np.ndarray) -> float:
    """u0^2 - |u1|^2 without cancellation."""
    nu = np.linalg.norm(u[1:])
    return float((u[0] - nu) * (u[0] + nu))


def _soc_step(u: np.ndarray, d: np.ndarray) -> float:
    # largest a with u + a d in the cone; u strictly interior
    a = _soc_det(d)
    b = u[0] * d[0] - u[1:] @ d[1:]
    c = _soc_det(u)
    if c <= 0:
        return 0.0
    roots = []
    if abs(a) <= 1e-14 * max(1.0, abs(b), abs(c)):
        if b < 0:
            roots.append(-c / (2 * b))
    else:
        disc = b * b - a * c
        if disc >= 0:
            sq = np.sqrt(disc)
            qv = -(b + np.copysign(sq, b))
            if qv != 0:
                roots.extend([qv / a, c / qv])
            else:
                roots.append(-b / a)
    pos = [r for r in roots if r > 0]
    alpha = min(pos) if pos else np.inf
    if d[0] < 0:
        alpha = min(alpha, -u[0] / d[0])
    return alpha


def _hyperbolic(w: np.ndarray) -> np.ndarray:
    k = w.size
    M = np.empty((k, k))
    M[0, 0] = w[0]
    M[0, 1:] = w[1:]
    M[1:, 0] = w[1:]
    M[1:, 1:] = np.eye(k - 1) + np.outer(w[1:], w[1:]) / (1.0 + w[0])
    return M


class _NTScaling:
    """Nesterov-Todd scaling W with W z = W^-T s = lam; stores W'W and its inverse."""

    def __init__(self, ops: _ConeOps, s: np.ndarray, z: np.ndarray):
        self.ops = ops
        l = ops.l
        self.d = np.sqrt(s[:l] / z[:l])
        self.lam = np.empty_like(s)
        self.lam[:l] = np.sqrt(s[:l] * z[:l])
        self.W = []
        self.Winv = []
        self.H = []
        self.Hinv = []
        for bl in ops.blocks:
            sb, zb = s[bl], z[bl]
            k = sb.size
            J = np.full(k, -1.0)
            J[0] = 1.0
            sn = np.sqrt(max((sb[0] - np.linalg.norm(sb[1:])) * (sb[0] + np.linalg.norm(sb[1:])), 1e-300))
            zn = np.sqrt(max((zb[0] - np.linalg.norm(zb[1:])) * (zb[0] + np.linalg.norm(zb[1:])), 1e-300))
            sbar = sb / sn
            zbar = zb / zn
            gamma = np.sqrt(max((1.0 + sbar @ zbar) / 2.0, 1e-300))
            wbar = (sbar + J * zbar) / (2.0 * gamma)
            beta = np.sqrt(sn / zn)
            Wb = beta * _hyperbolic(wbar)
            Wib = _hyperbolic(J * wbar) / beta
            self.W.append(Wb)
            self.Winv.append(Wib)
            self.H.append(Wb @ Wb)
            self.Hinv.append(Wib @ Wib)
            self.lam[bl] = Wb @ zb

    def apply_W(self, v):
        out = np.empty_like(v)
        l = self.ops.l
        out[:l] = self.d * v[:l]
        for bl, Wb in zip(self.ops.blocks, self.W):
            out[bl] = Wb @ v[bl]
        return out

    def apply_Winv(self, v):
        out = np.empty_like(v)
        l = self.ops.l
        out[:l] = v[:l] / self.d
        for bl, Wb in zip(self.ops.blocks, self.Winv):
            out[bl] = Wb @ v[bl]
        return out

    def apply_H(self, v):
        out = np.empty_like(v)
        l = self.ops.l
        out[:l] = self.d ** 2 * v[:l]
        for bl, Hb in zip(self.ops.blocks, self.H):
            out[bl] = Hb @ v[bl]
        return out

    def apply_Hinv(self, v):
        out = np.empty_like(v)
        l = self.ops.l
        out[:l] = v[:l] / self.d ** 2
        for bl, Hb in zip(self.ops.blocks, self.Hinv):
            out[bl] = Hb @ v[bl]
        return out


def _inf(v) -> float:
    return float(np.max(np.abs(v), initial=0.0))


class _KKT:
    """Solves [[P, A', G'], [A, 0, 0], [G, 0, -H]] [x; y; z] = [r1; r2; r3], H = W'W.

    With zh = W z the system becomes the quasi-definite
    [[P, A', Gs'], [A, 0, 0], [Gs, 0, -I]] in (x, y, zh), Gs = W^-T G, which
    is factored directly (forming Gs'Gs would square its conditioning near
    the cone boundary). Iterative refinement is done on the original system.
    """

    def __init__(self, P, G, A, scaling: _NTScaling, reg: float = 1e-11):
        self.P, self.G, self.A, self.sc = P, G, A, scaling
        n = G.shape[1]
        p = A.shape[0]
        m = G.shape[0]
        Gs = np.empty_like(G)
        l = scaling.ops.l
        Gs[:l] = G[:l] / scaling.d[:, None]
        for bl, Wib in zip(scaling.ops.blocks, scaling.Winv):
            Gs[bl] = Wib @ G[bl]
        self.Gs = Gs
        scale = max(1.0, _inf(Gs), 0.0 if P is None else _inf(P))
        self.delta = reg * scale
        N = n + p + m
        K = np.zeros((N, N))
        K[:n, :n] = self.delta * np.eye(n) if P is None else P + self.delta * np.eye(n)
        K[:n, n:n + p] = A.T
        K[n:n + p, :n] = A
        K[n:n + p, n:n + p] = -self.delta * np.eye(p)
        K[:n, n + p:] = Gs.T
        K[n + p:, :n] = Gs
        K[n + p:, n + p:] = -np.eye(m)
        self.n, self.p = n, p
        if not np.all(np.isfinite(K)):
            raise EngineError("KKT matrix is not finite")
        try:
            self.lu = sla.lu_factor(K, check_finite=False)
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise EngineError(f"KKT factorization failed: {exc}") from exc

    def _solve_once(self, r1, r2, r3):
        sc = self.sc
        rhs = np.concatenate([r1, r2, sc.apply_Winv(r3)])
        sol = sla.lu_solve(self.lu, rhs, check_finite=False)
        n, p = self.n, self.p
        x = sol[:n]
        y = sol[n:n + p]
        z = sc.apply_Winv(sol[n + p:])
        return x, y, z

    def solve(self, r1, r2, r3, refine: int = 4):
        x, y, z = self._solve_once(r1, r2, r3)
        P, G, A, sc = self.P, self.G, self.A, self.sc
        nrm = max(1.0, _inf(r1), _inf(r2), _inf(r3))
        for _ in range(refine):
            e1 = r1 - A.T @ y - G.T @ z
            if P is not None:
                e1 = e1 - P @ x
            e2 = r2 - A @ x
            e3 = r3 - G @ x + sc.apply_H(z)
            err = max(_inf(e1), _inf(e2), _inf(e3))
            if not np.isfinite(err) or err <= 1e-14 * nrm:
                break
            dx, dy, dz = self._solve_once(e1, e2, e3)
            x, y, z = x + dx, y + dy, z + dz
        return x, y, z


def _equilibrate(cone: _Cone, ops: _ConeOps, iters: int = 15):
    """Ruiz scaling; SOC blocks share one row factor so cone membership is kept."""
    A, G = cone.A.copy(), cone.G.copy()
    P = None if cone.P is None else cone.P.copy()
    n = G.shape[1]
    D = np.ones(n)
    EA = np.ones(A.shape[0])
    EG = np.ones(G.shape[0])
    for _ in range(iters):
        colmax = np.zeros(n)
        if A.size:
            colmax = np.maximum(colmax, np.max(np.abs(A), axis=0))
        if G.size:
            colmax = np.maximum(colmax, np.max(np.abs(G), axis=0))
        if P is not None:
            colmax = np.maximum(colmax, np.max(np.abs(P), axis=0))
        dcol = np.where(colmax > 0, 1.0 / np.sqrt(colmax), 1.0)
        ra = np.max(np.abs(A), axis=1) if A.size else np.zeros(A.shape[0])
        ea = np.where(ra > 0, 1.0 / np.sqrt(ra), 1.0)
        rg = np.max(np.abs(G), axis=1) if G.size else np.zeros(G.shape[0])
        eg = np.where(rg > 0, 1.0 / np.sqrt(rg), 1.0)
        for bl in ops.blocks:
            mx = float(np.max(rg[bl]))
            eg[bl] = 1.0 / np.sqrt(mx) if mx > 0 else 1.0
        A = (ea[:, None] * A) * dcol[None, :]
        G = (eg[:, None] * G) * dcol[None, :]
        if P is not None:
            P = (dcol[:, None] * P) * dcol[None, :]
        D *= dcol
        EA *= ea
        EG *= eg
    c = D * cone.c
    ref = float(np.max(np.abs(c), initial=0.0))
    if P is not None:
        ref = max(ref, float(np.mean(np.abs(np.diag(P)))))
    sigma = 1.0 / ref if ref > 0 else 1.0
    scaled = _Cone(P=None if P is None else sigma * P, c=sigma * c, G=G, h=EG * cone.h, A=A, b=EA * cone.b,
                   l=cone.l, q=cone.q)
    return scaled, D, EA, EG, sigma


@dataclass
class _ConeResult:
    status: Status
    x: Optional[np.ndarray]
    s: Optional[np.ndarray]
    y: Optional[np.ndarray]
    z: Optional[np.ndarray]
    pcost: float
    dcost: float
    pres: float
    dres: float
    gap: float
    iterations: int
    message: str = ""


def _hsd_solve(cone: _Cone, tol: float, iter_limit: int) -> _ConeResult:
    """Homogeneous self-dual interior point method with a quadratic objective.

    Residuals of the embedding (xi = x / tau):
      r1 = P x + A'y + G'z + c tau
      r2 = -A x + b tau
      r3 = -G x + h tau - s
      r4 = -c.x - b.y - h.z - x'Px / tau - kappa
    """
    ops = _ConeOps(cone.l, cone.q)
    scaled, D, EA, EG, sigma_c = _equilibrate(cone, ops)
    P, c, G, h, A, b = scaled.P, scaled.c, scaled.G, scaled.h, scaled.A, scaled.b
    n, m, p = G.shape[1], G.shape[0], A.shape[0]
    e = ops.e
    Pm = (lambda v: P @ v) if P is not None else (lambda v: np.zeros_like(v))

    def fail(status, msg, it=0):
        return _ConeResult(status, None, None, None, None, np.nan, np.nan, np.inf, np.inf, np.inf, it, msg)

    # starting point from the identity-scaled KKT system
    ident = _NTScaling(ops, e.copy(), e.copy())
    try:
        kkt = _KKT(P, G, A, ident)
    except EngineError as exc:
        return fail(Status.NUMERICAL, str(exc))
    x, y, zt = kkt.solve(-c, b, h)
    s = -zt
    z = zt.copy()
    # s = h - Gx and z from the same solve; shift both into the cone interior
    s = h - G @ x
    a_p = ops.min_eig(s)
    s = s + (1.0 - min(a_p, 0.0)) * e if np.isfinite(a_p) and a_p < 1e-8 else (s if np.isfinite(a_p) else e.copy())
    if m:
        a_d = ops.min_eig(z)
        z = z + (1.0 - min(a_d, 0.0)) * e if np.isfinite(a_d) and a_d < 1e-8 else (z if np.isfinite(a_d) else e.copy())
    tau, kappa = 1.0, 1.0

    nb = max(1.0, np.linalg.norm(b))
    nh = max(1.0, np.linalg.norm(h))
    nc = max(1.0, np.linalg.norm(c))
    best = None
    best_merit = np.inf
    # stalled runs may still return their best iterate if it meets this looser level
    reduced = max(10.0 * tol, 0.1 * math.sqrt(tol))
    stalled = 0
    status = Status.ITER_LIMIT
    msg = ""
    it = 0
    for it in range(iter_limit + 1):
        Px = Pm(x)
        xPx = float(x @ Px)
        r1 = Px + A.T @ y + G.T @ z + c * tau
        r2 = -A @ x + b * tau
        r3 = -G @ x + h * tau - s
        r4 = -(c @ x) - (b @ y) - (h @ z) - xPx / tau - kappa
        mu = (s @ z + tau * kappa) / (ops.degree + 1)

        pcost = 0.5 * xPx / tau ** 2 + (c @ x) / tau
        dcost = -0.5 * xPx / tau ** 2 - (b @ y + h @ z) / tau
        # residuals relative to the size of the terms that make them up
        Ax, Gx = A @ x, G @ x
        pres = max(np.linalg.norm(r2) / max(nb * tau, np.linalg.norm(Ax), 1e-300),
                   np.linalg.norm(Gx + s - h * tau) / max(nh * tau, np.linalg.norm(Gx), np.linalg.norm(s), 1e-300))
        dres = np.linalg.norm(r1) / max(nc * tau, np.linalg.norm(Px), np.linalg.norm(A.T @ y),
                                         np.linalg.norm(G.T @ z), 1e-300)
        gap = abs(pcost - dcost)
        denom_gap = max(abs(pcost), abs(dcost))
        relgap = gap / denom_gap if denom_gap > 0 else gap
        if not all(np.isfinite([pres, dres, gap])):
            status, msg = Status.NUMERICAL, "non-finite iterate"
            break
        if pres <= tol and dres <= tol and (gap <= tol or relgap <= tol):
            status = Status.OPTIMAL
            best = (x / tau, s / tau, y / tau, z / tau, pcost, dcost, pres, dres, gap)
            break
        # infeasibility certificates
        hz_by = h @ z + b @ y
        if hz_by < 0:
            cert = np.linalg.norm(A.T @ y + G.T @ z) / (-hz_by)
            if cert <= tol and tau < 1e-2 * max(1.0, kappa):
                status, msg = Status.INFEASIBLE, "primal infeasibility certificate"
                break
        cx = c @ x
        if cx < 0:
            cert = max(np.linalg.norm(A @ x), np.linalg.norm(G @ x + s), np.linalg.norm(Px)) / (-cx)
            if cert <= tol and tau < 1e-2 * max(1.0, kappa):
                status, msg = Status.UNBOUNDED, "dual infeasibility certificate"
                break
        merit = max(pres, dres, min(gap, relgap))
        if _log.isEnabledFor(logging.DEBUG):
            _log.debug("it %3d pcost %+.8e dcost %+.8e pres %.2e dres %.2e gap %.2e tau %.2e kappa %.2e",
                       it, pcost, dcost, pres, dres, gap, tau, kappa)
        if pres <= reduced and dres <= reduced and (gap <= reduced or relgap <= reduced) and merit < best_merit:
            best_merit = merit
            best = (x / tau, s / tau, y / tau, z / tau, pcost, dcost, pres, dres, gap)
        if it == iter_limit:
            break

        try:
            sc = _NTScaling(ops, s, z)
            kkt = _KKT(P, G, A, sc)
        except (EngineError, FloatingPointError) as exc:
            status, msg = Status.NUMERICAL, str(exc)
            break
        lam = sc.lam
        xi = x / tau
        cq = c + 2.0 * Pm(xi)
        xiPxi = xPx / tau ** 2
        u1 = kkt.solve(-c, b, h)
        nu1 = cq @ u1[0] + b @ u1[1] + h @ u1[2]
        denom = kappa / tau - nu1 + xiPxi

        def direction(eta, ds, dk):
            wl = sc.apply_W(ops.jdiv(lam, ds))
            u0 = kkt.solve(-eta * r1, eta * r2, eta * r3 + wl)
            nu0 = cq @ u0[0] + b @ u0[1] + h @ u0[2]
            dtau = (-eta * r4 + nu0 - dk / tau) / denom
            dx = u0[0] + dtau * u1[0]
            dy = u0[1] + dtau * u1[1]
            dz = u0[2] + dtau * u1[2]
            dsv = -wl - sc.apply_H(dz)
            dkap = -(dk + kappa * dtau) / tau
            return dx, dy, dz, dsv, dtau, dkap

        def step_len(dsv, dz, dtau, dkap):
            a = min(ops.max_step(s, dsv), ops.max_step(z, dz))
            if dtau < 0:
                a = min(a, -tau / dtau)
            if dkap < 0:
                a = min(a, -kappa / dkap)
            return a

        ds_aff = ops.jprod(lam, lam)
        aff = direction(1.0, ds_aff, tau * kappa)
        a_aff = min(1.0, step_len(aff[3], aff[2], aff[4], aff[5]))
        sigma = (1.0 - a_aff) ** 3
        ws = sc.apply_Winv(aff[3])
        wz = sc.apply_W(aff[2])
        ds = ds_aff + ops.jprod(ws, wz) - sigma * mu * e
        dk = tau * kappa + aff[4] * aff[5] - sigma * mu
        dx, dy, dz, dsv, dtau, dkap = direction(1.0 - sigma, ds, dk)
        alpha = min(1.0, 0.99 * step_len(dsv, dz, dtau, dkap))
        # backtrack until the new point stays in a neighbourhood of the central path
        for _ in range(40):
            if ops.centrality(s + alpha * dsv, z + alpha * dz, tau + alpha * dtau, kappa + alpha * dkap) >= 1e-4:
                break
            alpha *= 0.8
        _log.debug("    alpha %.3e aff %.3e sigma %.2e min s %.2e min z %.2e", alpha, a_aff, sigma,
                   ops.min_eig(s), ops.min_eig(z))
        if not np.isfinite(alpha) or alpha <= 0:
            status, msg = Status.NUMERICAL, "zero step length"
            break
        stalled = stalled + 1 if alpha < 1e-6 else 0
        if stalled >= 5 and best is not None:
            status, msg = Status.NUMERICAL, "stalled"
            break
        x = x + alpha * dx
        y = y + alpha * dy
        z = z + alpha * dz
        s = s + alpha * dsv
        tau = tau + alpha * dtau
        kappa = kappa + alpha * dkap
        if tau <= 0 or kappa <= 0:
            status, msg = Status.NUMERICAL, "lost positivity of tau/kappa"
            break
        # keep the homogeneous iterate at a sane scale
        if tau > 1e8 or tau < 1e-8:
            f = 1.0 / tau
            x, y, z, s, tau, kappa = x * f, y * f, z * f, s * f, 1.0, kappa * f

    if status is Status.OPTIMAL or (best is not None and status in (Status.ITER_LIMIT, Status.NUMERICAL)):
        if status is not Status.OPTIMAL:
            # progress stalled; the best iterate met the reduced accuracy level
            msg = "reduced accuracy" + (f" ({msg})" if msg else "")
            status = Status.OPTIMAL
        xs, ss, ys, zs, pcost, dcost, pres, dres, gap = best
        # undo equilibration
        return _ConeResult(status, D * xs, ss / EG, EA * ys / sigma_c, EG * zs / sigma_c, pcost / sigma_c,
                           dcost / sigma_c, pres, dres, gap / sigma_c, it, msg)
    if status is Status.ITER_LIMIT:
        return _ConeResult(status, D * (x / tau), None, None, None, np.nan, np.nan, np.inf, np.inf, np.inf, it,
                           msg or "iteration limit")
    return fail(status, msg, it)


# ---------------------------------------------------------------- backends

Backend = Callable[[ConvexProgram, float, int], SolveStatus]
_BACKENDS: dict[str, Backend] = {}


def register_backend(name: str, fn: Backend) -> None:
    _BACKENDS[name] = fn


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


POLISH_MAX_SIZE = 1500


def _polish(cone: _Cone, res: _ConeResult) -> Optional[tuple[np.ndarray, float]]:
    """Exact KKT solution on the active set guessed from the interior point.

    Only for purely linear rows. Returns (x, residual) when the solution of
    the equality-constrained system is primal and dual feasible, else None
    (the interior point result then stands).
    """
    if cone.q or res.s is None or res.z is None:
        return None
    n, p = cone.c.size, cone.A.shape[0]
    act = np.flatnonzero(res.z > res.s)
    k = act.size
    if n + k + p > POLISH_MAX_SIZE:
        return None
    Ga = cone.G[act]
    P = cone.P if cone.P is not None else np.zeros((n, n))
    K = np.block([[P, Ga.T, cone.A.T],
                  [Ga, np.zeros((k, k)), np.zeros((k, p))],
                  [cone.A, np.zeros((p, k)), np.zeros((p, p))]])
    rhs = np.concatenate([-cone.c, cone.h[act], cone.b])
    sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
    x, za, y = sol[:n], sol[n:n + k], sol[n + k:]
    scale = 1.0 + max(float(np.max(np.abs(cone.h), initial=0.0)), float(np.max(np.abs(cone.b), initial=0.0)))
    cscale = 1.0 + float(np.max(np.abs(cone.c), initial=0.0))
    prim = max(float(np.max(cone.G @ x - cone.h, initial=0.0)),
               float(np.max(np.abs(cone.A @ x - cone.b), initial=0.0))) / scale
    stat = float(np.max(np.abs(P @ x + cone.c + Ga.T @ za + cone.A.T @ y), initial=0.0)) / cscale
    dual = max(0.0, -float(np.min(za, initial=0.0))) / cscale
    resid = max(prim, stat, dual)
    if not np.all(np.isfinite(sol)) or resid > 1e-11:
        return None
    return x, resid


def _reference(prog: ConvexProgram, tol: float, iter_limit: int) -> SolveStatus:
    cone = _to_cone(prog)
    with np.errstate(all="ignore"):
        res = _hsd_solve(cone, tol, iter_limit)
    if res.x is None:
        return SolveStatus(res.status, None, np.nan, np.inf, iterations=res.iterations, message=res.message)
    if res.status is Status.OPTIMAL:
        polished = _polish(cone, res)
        if polished is not None:
            x = polished[0][: prog.n]
            obj = prog.objective(x)
            # an exact KKT point: the objective itself is the certified bound
            return SolveStatus(res.status, x, obj, polished[1], dual_bound=obj, iterations=res.iterations,
                               message="polished")
    x = res.x[: prog.n]
    obj = prog.objective(x)
    dual_bound = res.dcost + prog.const if np.isfinite(res.dcost) else -np.inf
    kkt = max(res.pres, res.dres, abs(res.gap) / max(1.0, abs(obj)))
    return SolveStatus(res.status, x, obj, kkt, dual_bound=dual_bound, iterations=res.iterations,
                       message=res.message)


register_backend("reference", _reference)


def _cvxopt_backend(prog: ConvexProgram, tol: float, iter_limit: int) -> SolveStatus:
    try:
        import cvxopt
    except ImportError as exc:  # pragma: no cover - optional dependency
        raise EngineError("cvxopt is not installed") from exc
    cone = _to_cone(prog)
    n = prog.n
    opts = {"show_progress": False, "abstol": tol, "reltol": tol, "feastol": tol, "maxiters": iter_limit}
    args = dict(dims={"l": cone.l, "q": cone.q, "s": []})
    if cone.A.shape[0]:
        args.update(A=cvxopt.matrix(cone.A), b=cvxopt.matrix(cone.b))
    Pm = cone.P if cone.P is not None else np.zeros((n, n))
    sol = cvxopt.solvers.coneqp(cvxopt.matrix(Pm), cvxopt.matrix(cone.c), cvxopt.matrix(cone.G),
                                cvxopt.matrix(cone.h), options=opts, **args)
    st = sol["status"]
    if st == "primal infeasible":
        return SolveStatus(Status.INFEASIBLE, None, np.nan, np.inf)
    if st == "dual infeasible":
        return SolveStatus(Status.UNBOUNDED, None, np.nan, np.inf)
    if sol["x"] is None:
        return SolveStatus(Status.NUMERICAL, None, np.nan, np.inf, message=st)
    x = np.array(sol["x"]).ravel()[: prog.n]
    status = Status.OPTIMAL if st == "optimal" else Status.ITER_LIMIT
    obj = prog.objective(x)
    return SolveStatus(status, x, obj, float(sol.get("gap") or 0.0) / max(1.0, abs(obj)),
                       dual_bound=float(sol["dual objective"]) + prog.const if sol["dual objective"] is not None else -np.inf)


register_backend("external:cvxopt", _cvxopt_backend)


def _clarabel_backend(prog: ConvexProgram, tol: float, iter_limit: int) -> SolveStatus:
    try:
        import clarabel
    except ImportError as exc:  # pragma: no cover - optional dependency
        raise EngineError("clarabel is not installed") from exc
    cone = _to_cone(prog)
    nx = prog.n
    Amat = sp.csc_matrix(np.vstack([cone.A, cone.G]))
    bvec = np.concatenate([cone.b, cone.h])
    cones = []
    if cone.A.shape[0]:
        cones.append(clarabel.ZeroConeT(cone.A.shape[0]))
    if cone.l:
        cones.append(clarabel.NonnegativeConeT(cone.l))
    cones.extend(clarabel.SecondOrderConeT(k) for k in cone.q)
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = iter_limit
    settings.tol_gap_abs = settings.tol_gap_rel = settings.tol_feas = tol
    Pm = sp.csc_matrix((nx, nx)) if cone.P is None else sp.triu(sp.csc_matrix(cone.P)).tocsc()
    solver = clarabel.DefaultSolver(Pm, cone.c, Amat, bvec, cones, settings)
    sol = solver.solve()
    st = str(sol.status)
    if "PrimalInfeasible" in st:
        return SolveStatus(Status.INFEASIBLE, None, np.nan, np.inf)
    if "DualInfeasible" in st:
        return SolveStatus(Status.UNBOUNDED, None, np.nan, np.inf)
    x = np.asarray(sol.x)[: prog.n]
    if not np.all(np.isfinite(x)):
        return SolveStatus(Status.NUMERICAL, None, np.nan, np.inf, message=st)
    status = Status.OPTIMAL if st in ("Solved", "AlmostSolved") else Status.ITER_LIMIT
    obj = prog.objective(x)
    return SolveStatus(status, x, obj, 0.0, dual_bound=float(sol.obj_val_dual) + prog.const,
                       iterations=int(sol.iterations), message=st)


register_backend("external:clarabel", _clarabel_backend)

_default_backend = "reference"


def set_default_backend(name: str) -> None:
    global _default_backend
    if name not in _BACKENDS:
        raise KeyError(f"unknown solver backend {name!r}; available: {available_backends()}")
    _default_backend = name


def get_default_backend() -> str:
    return _default_backend


def solve(program: ConvexProgram, tol: float = 1e-8, iter_limit: int = 100, backend: Optional[str] = None) -> SolveStatus:
    """Solve ``program``; status Optimal means residuals are below ``tol``."""
    name = backend or _default_backend
    try:
        fn = _BACKENDS[name]
    except KeyError:
        raise KeyError(f"unknown solver backend {name!r}; available: {available_backends()}") from None
    return fn(program, tol, iter_limit)


def solve_lp(lin, rows_lin=None, var_bounds=None, eq_rows=None, tol: float = 1e-8, iter_limit: int = 100,
             backend: Optional[str] = None) -> SolveStatus:
    """LP convenience wrapper: ``rows_lin = (A, rhs)``, ``var_bounds = (lo, hi)``."""
    a_ub, b_ub = rows_lin if rows_lin is not None else (None, None)
    a_eq, b_eq = eq_rows if eq_rows is not None else (None, None)
    lo, hi = var_bounds if var_bounds is not None else (None, None)
    prog = ConvexProgram(lin=lin, a_ub=a_ub, b_ub=b_ub, a_eq=a_eq, b_eq=b_eq, lo=lo, hi=hi)
    return solve(prog, tol=tol, iter_limit=iter_limit, backend=backend)
