"""W-space lifting of the rectangular ACOPF into a penalized LCQP.

The voltage vector is ``V = [Vd_1..Vd_N, Vq_k for k != ref]`` and every
product of two voltage components is replaced by an entry of the Gram
matrix ``W = V V'``. Flows and injections become linear in W; the rank-one
requirement is replaced by penalties ``lambda_ij (W_ii W_jj - W_ij^2)`` on the
2x2 principal minors of each line, giving

    minimize  x'Ax + b'x + const   subject to  L x <= l

with x = [w, pg, qg, pf, qf].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .convex_engine import ConvexProgram, SOCRow
from .grid_model import PowerNetwork, line_admittance

DEFAULT_RHO = 1000.0
PENALTY_FORMS = ("symmetric", "printed", "complex")


@dataclass(frozen=True)
class WIndexMap:
    n_bus: int
    ref: int  # 0-based position of the reference bus

    @property
    def dim(self) -> int:
        return 2 * self.n_bus - 1

    @property
    def n_w(self) -> int:
        return self.dim * (self.dim + 1) // 2

    def d_axis(self, k: int) -> int:
        return k

    def q_axis(self, k: int) -> Optional[int]:
        """Axis of the imaginary part of bus k, or None for the reference bus."""
        if k == self.ref:
            return None
        return self.n_bus + (k if k < self.ref else k - 1)

    def flat(self, p: int, q: int) -> int:
        """0-based flat index of the unordered pair (p, q)."""
        if p > q:
            p, q = q, p
        d = self.dim
        return p * d - p * (p - 1) // 2 + (q - p)

    def pair(self, k: int) -> tuple[int, int]:
        d = self.dim
        p = 0
        while k >= d - p:
            k -= d - p
            p += 1
        return p, p + k

    def pairs(self):
        d = self.dim
        return [(p, q) for p in range(d) for q in range(p, d)]

    def to_matrix(self, w: np.ndarray) -> np.ndarray:
        d = self.dim
        iu = np.triu_indices(d)
        M = np.zeros((d, d))
        M[iu] = w
        return M + np.triu(M, 1).T

    def from_matrix(self, M: np.ndarray) -> np.ndarray:
        return np.asarray(M)[np.triu_indices(self.dim)].copy()

    def stack_voltage(self, vd: np.ndarray, vq: np.ndarray) -> np.ndarray:
        keep = [k for k in range(self.n_bus) if k != self.ref]
        return np.concatenate([vd, np.asarray(vq)[keep]])


def build_index_map(n_bus: int, ref: int = 0) -> WIndexMap:
    if n_bus < 1 or not 0 <= ref < n_bus:
        raise ValueError("need n_bus >= 1 and a reference bus inside the network")
    return WIndexMap(n_bus=n_bus, ref=ref)


@dataclass(frozen=True)
class VariableLayout:
    n_w: int
    n_gen: int
    n_line: int

    @property
    def w(self) -> slice:
        return slice(0, self.n_w)

    @property
    def pg(self) -> slice:
        return slice(self.n_w, self.n_w + self.n_gen)

    @property
    def qg(self) -> slice:
        s = self.n_w + self.n_gen
        return slice(s, s + self.n_gen)

    @property
    def pf(self) -> slice:
        s = self.n_w + 2 * self.n_gen
        return slice(s, s + 2 * self.n_line)

    @property
    def qf(self) -> slice:
        s = self.n_w + 2 * self.n_gen + 2 * self.n_line
        return slice(s, s + 2 * self.n_line)

    @property
    def size(self) -> int:
        return self.n_w + 2 * self.n_gen + 4 * self.n_line

    def to_dict(self) -> dict:
        return {k: [getattr(self, k).start, getattr(self, k).stop] for k in ("w", "pg", "qg", "pf", "qf")}


@dataclass(frozen=True)
class LineTerms:
    """Per-line data: endpoints, admittance, penalty weight and minor axes."""

    i: int
    j: int
    g: float
    b: float
    lam: float
    d_axes: tuple
    q_axes: Optional[tuple]  # None when a q-axis is the reference one


@dataclass
class LiftedLCQP:
    A: sp.csr_matrix
    b: np.ndarray
    const: float
    L: sp.csr_matrix
    l: np.ndarray
    layout: VariableLayout
    index: WIndexMap
    lambda_pen: np.ndarray
    rho: float
    network: PowerNetwork
    penalty_form: str = "symmetric"
    eq_pairs: list = field(default_factory=list)  # (row, row+1) encoding one equality
    lo: np.ndarray = None  # bounds collected from singleton rows
    hi: np.ndarray = None
    lines: list = field(default_factory=list)
    minor_cones: bool = False
    row_kinds: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.layout.size

    @property
    def m(self) -> int:
        return self.L.shape[0]

    def objective(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float)
        return float(x @ (self.A @ x) + self.b @ x + self.const)

    def max_violation(self, x: np.ndarray) -> float:
        v = float(np.max(self.L @ x - self.l, initial=0.0))
        if self.minor_cones:
            for row in self.cone_rows():
                v = max(v, float(np.linalg.norm(row.P @ x + row.p0) - row.q @ x - row.q0))
        return v

    def cost_terms(self) -> tuple[sp.csr_matrix, np.ndarray, float]:
        """Generation-cost part (A, b, const) of the objective, i.e. without penalties."""
        lay = self.layout
        n = self.n
        A = sp.lil_matrix((n, n))
        b = np.zeros(n)
        const = 0.0
        for k, gen in enumerate(self.network.gens):
            A[lay.pg.start + k, lay.pg.start + k] = gen.cost_quad
            b[lay.pg.start + k] = gen.cost_lin
            const += gen.cost_const
        return A.tocsr(), b, const

    @property
    def penalty_nonnegative(self) -> bool:
        """True when every feasible point has penalty >= 0 (minor cones present)."""
        return self.minor_cones and self.penalty_form in ("complex", "symmetric")

    def cone_rows(self) -> list:
        """Second-order cone rows W_ii W_jj >= W_ij^2 (only when minor_cones is on)."""
        if not self.minor_cones:
            return []
        rows = []
        if self.penalty_form == "complex":
            # ||(2 Re, 2 Im, |V_i|^2 - |V_j|^2)|| <= |V_i|^2 + |V_j|^2
            for ln in self.lines:
                mi, mj, re, im = line_minor_terms(self.index, ln.i, ln.j)
                P = np.zeros((3, self.n))
                q = np.zeros(self.n)
                for k, v in re.items():
                    P[0, k] += 2.0 * v
                for k, v in im.items():
                    P[1, k] += 2.0 * v
                for k, v in mi.items():
                    P[2, k] += v
                    q[k] += v
                for k, v in mj.items():
                    P[2, k] -= v
                    q[k] += v
                rows.append(SOCRow(P=P, p0=np.zeros(3), q=q, q0=0.0))
            return rows
        seen = set()
        for ln in self.lines:
            for axes in (ln.d_axes, ln.q_axes):
                if axes is None or axes in seen:
                    continue
                seen.add(axes)
                a, c = axes
                ii, jj, ij = self.index.flat(a, a), self.index.flat(c, c), self.index.flat(a, c)
                P = np.zeros((2, self.n))
                P[0, ij] = 2.0
                P[1, ii] = 1.0
                P[1, jj] = -1.0
                q = np.zeros(self.n)
                q[ii] = q[jj] = 1.0
                rows.append(SOCRow(P=P, p0=np.zeros(2), q=q, q0=0.0))
        return rows

    def feasible_rows(self):
        """Split L x <= l into (a_ub, b_ub, a_eq, b_eq, lo, hi) for the convex engine."""
        L = self.L.tocsr()
        pair_first = {a for a, _ in self.eq_pairs}
        pair_second = {b for _, b in self.eq_pairs}
        nnz = np.diff(L.indptr)
        ub_rows, eq_rows = [], []
        for k in range(L.shape[0]):
            if k in pair_second:
                continue
            if k in pair_first:
                eq_rows.append(k)
            elif nnz[k] == 1 and self.row_kinds and self.row_kinds[k] == "bound":
                continue
            else:
                ub_rows.append(k)
        return (L[ub_rows], self.l[ub_rows], L[eq_rows], self.l[eq_rows], self.lo.copy(), self.hi.copy())

    def program(self, lin: Optional[np.ndarray] = None, q_mat=None, const: float = 0.0) -> ConvexProgram:
        """ConvexProgram over the feasible set with the given objective."""
        a_ub, b_ub, a_eq, b_eq, lo, hi = self.feasible_rows()
        return ConvexProgram(lin=np.zeros(self.n) if lin is None else lin, q_mat=q_mat, a_ub=a_ub.toarray(),
                             b_ub=b_ub, a_eq=a_eq.toarray(), b_eq=b_eq, lo=lo, hi=hi,
                             quad_rows=self.cone_rows(), const=const)


@dataclass
class VoltageSolution:
    v_d: np.ndarray
    v_q: np.ndarray
    rank_ratio: float
    residuals: dict

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.v_d, self.v_q)

    @property
    def angle_deg(self) -> np.ndarray:
        return np.degrees(np.arctan2(self.v_q, self.v_d))


class _RowBuilder:
    def __init__(self, n: int):
        self.n = n
        self.rows, self.cols, self.vals, self.rhs = [], [], [], []
        self.kinds = []
        self.eq_pairs = []

    def le(self, coefs: dict, rhs: float, kind: str = "ineq"):
        r = len(self.rhs)
        for c, v in coefs.items():
            if v != 0.0:
                self.rows.append(r)
                self.cols.append(c)
                self.vals.append(v)
        self.rhs.append(rhs)
        self.kinds.append(kind)
        return r

    def ge(self, coefs: dict, rhs: float, kind: str = "ineq"):
        return self.le({c: -v for c, v in coefs.items()}, -rhs, kind)

    def eq(self, coefs: dict, rhs: float, kind: str = "eq"):
        r = self.le(coefs, rhs, kind)
        self.ge(coefs, rhs, kind)
        self.eq_pairs.append((r, r + 1))

    def matrix(self):
        L = sp.csr_matrix((self.vals, (self.rows, self.cols)), shape=(len(self.rhs), self.n))
        L.sum_duplicates()
        return L, np.asarray(self.rhs, dtype=float)


def _add(d: dict, k: int, v: float):
    d[k] = d.get(k, 0.0) + v


def flow_coefficients(idx: WIndexMap, i: int, j: int, g: float, b: float) -> tuple[dict, dict]:
    """W-linear expressions of P_ij and Q_ij (from i to j) for a line with series g + jb."""
    di, dj, qi, qj = idx.d_axis(i), idx.d_axis(j), idx.q_axis(i), idx.q_axis(j)
    P: dict = {}
    Q: dict = {}
    # |V_i|^2
    _add(P, idx.flat(di, di), g)
    _add(Q, idx.flat(di, di), -b)
    if qi is not None:
        _add(P, idx.flat(qi, qi), g)
        _add(Q, idx.flat(qi, qi), -b)
    # Vd_i Vd_j
    _add(P, idx.flat(di, dj), -g)
    _add(Q, idx.flat(di, dj), b)
    # Vq_i Vq_j
    if qi is not None and qj is not None:
        _add(P, idx.flat(qi, qj), -g)
        _add(Q, idx.flat(qi, qj), b)
    # Vd_i Vq_j
    if qj is not None:
        _add(P, idx.flat(di, qj), b)
        _add(Q, idx.flat(di, qj), g)
    # Vq_i Vd_j
    if qi is not None:
        _add(P, idx.flat(qi, dj), -b)
        _add(Q, idx.flat(qi, dj), -g)
    return P, Q


def line_minor_terms(idx: WIndexMap, i: int, j: int) -> tuple[dict, dict, dict, dict]:
    """Linear forms of |V_i|^2, |V_j|^2, Re(V_i V_j*) and Im(V_i V_j*) in w."""
    di, dj, qi, qj = idx.d_axis(i), idx.d_axis(j), idx.q_axis(i), idx.q_axis(j)
    mi = {idx.flat(di, di): 1.0}
    mj = {idx.flat(dj, dj): 1.0}
    re = {idx.flat(di, dj): 1.0}
    im: dict = {}
    if qi is not None:
        _add(mi, idx.flat(qi, qi), 1.0)
        _add(im, idx.flat(qi, dj), 1.0)
    if qj is not None:
        _add(mj, idx.flat(qj, qj), 1.0)
        _add(im, idx.flat(di, qj), -1.0)
    if qi is not None and qj is not None:
        _add(re, idx.flat(qi, qj), 1.0)
    return mi, mj, re, im


def _dot(form: dict, w: np.ndarray) -> float:
    return float(sum(v * w[k] for k, v in form.items()))


def penalty_weight(g_sh: float, g: float, b_sh: float, b: float, rho: float) -> float:
    return rho * ((g_sh + g) ** 2 + (b_sh + b) ** 2)


def _abs_bound(coefs: dict, wmax: np.ndarray) -> float:
    return float(sum(abs(v) * wmax[k] for k, v in coefs.items()))


def build_lcqp(network: PowerNetwork, rho: float = DEFAULT_RHO, penalty_form: str = "complex",
               loss_cuts: bool = True, minor_cones: bool = True) -> LiftedLCQP:
    """Assemble the penalized LCQP for ``network``.

    ``penalty_form``:
      * ``"complex"``: one term per line on the complex 2x2 block,
        |V_i|^2 |V_j|^2 - |V_i V_j*|^2 (vanishes iff the line block is rank one);
      * ``"symmetric"``: the real minors of the d-block and of the q-block;
      * ``"printed"``: real d-block minor plus a linear q-block term.

    ``minor_cones`` adds the convex rows "minor >= 0" for every penalized
    minor. Without them the minors can go negative inside the W box and
    the penalty rewards that, so the LCQP optimum need not be a power flow.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    if penalty_form not in PENALTY_FORMS:
        raise ValueError(f"penalty_form must be one of {PENALTY_FORMS}")
    pos = network.bus_index()
    N = network.n_bus
    idx = build_index_map(N, pos[network.ref_bus])
    lay = VariableLayout(idx.n_w, len(network.gens), len(network.lines))
    n = lay.size
    vmax = np.array([bus.v_max for bus in network.buses])
    vmin = np.array([bus.v_min for bus in network.buses])
    axis_vmax = np.concatenate([vmax, np.delete(vmax, idx.ref)])

    # W box from voltage magnitude limits
    lo = np.full(n, -np.inf)
    hi = np.full(n, np.inf)
    wmax = np.empty(idx.n_w)
    for k, (p, q) in enumerate(idx.pairs()):
        wmax[k] = axis_vmax[p] * axis_vmax[q]
        if p == q:
            lo[k], hi[k] = 0.0, wmax[k]
        else:
            lo[k], hi[k] = -wmax[k], wmax[k]
    for k, gen in enumerate(network.gens):
        lo[lay.pg.start + k], hi[lay.pg.start + k] = gen.p_min, gen.p_max
        lo[lay.qg.start + k], hi[lay.qg.start + k] = gen.q_min, gen.q_max

    A = sp.lil_matrix((n, n))
    bvec = np.zeros(n)
    const = 0.0
    for k, gen in enumerate(network.gens):
        bvec[lay.pg.start + k] += gen.cost_lin
        A[lay.pg.start + k, lay.pg.start + k] += gen.cost_quad
        const += gen.cost_const

    rb = _RowBuilder(n)
    lam = np.zeros(len(network.lines))
    line_terms = []
    inflow_p = [dict() for _ in range(N)]
    inflow_q = [dict() for _ in range(N)]
    for li, ln in enumerate(network.lines):
        i, j = pos[ln.from_bus], pos[ln.to_bus]
        g, b = line_admittance(ln.r, ln.x)
        bus_i = network.buses[i]
        lam[li] = penalty_weight(bus_i.g_sh, g, bus_i.b_sh, b, rho)
        d_axes = (idx.d_axis(i), idx.d_axis(j))
        qi, qj = idx.q_axis(i), idx.q_axis(j)
        q_axes = (qi, qj) if qi is not None and qj is not None else None
        line_terms.append(LineTerms(i, j, g, b, lam[li], d_axes, q_axes))

        # penalty on the 2x2 minors
        def minor(axes):
            a, c = axes
            ii, jj, ij = idx.flat(a, a), idx.flat(c, c), idx.flat(a, c)
            A[ii, jj] += lam[li] / 2.0
            A[jj, ii] += lam[li] / 2.0
            A[ij, ij] -= lam[li]

        def add_outer(u: dict, v: dict, coef: float):
            # coef * (u.w)(v.w) as a symmetric quadratic form
            for ku, cu in u.items():
                for kv, cv in v.items():
                    A[ku, kv] += 0.5 * coef * cu * cv
                    A[kv, ku] += 0.5 * coef * cu * cv

        if penalty_form == "complex":
            # |V_i|^2 |V_j|^2 - |V_i V_j*|^2, the minor of the complex 2x2 block
            mi, mj, re, im = line_minor_terms(idx, i, j)
            add_outer(mi, mj, lam[li])
            add_outer(re, re, -lam[li])
            add_outer(im, im, -lam[li])
        elif penalty_form == "symmetric":
            minor(d_axes)
            if q_axes is not None:
                minor(q_axes)
        else:
            # printed variant: lambda (W_i'i' + W_j'j' - 2 W_i'j'), reference q-entries are zero
            minor(d_axes)
            if qi is not None:
                bvec[idx.flat(qi, qi)] += lam[li]
            if qj is not None:
                bvec[idx.flat(qj, qj)] += lam[li]
            if q_axes is not None:
                bvec[idx.flat(qi, qj)] -= 2.0 * lam[li]

        for direction, (a, c) in enumerate(((i, j), (j, i))):
            Pc, Qc = flow_coefficients(idx, a, c, g, b)
            pv = lay.pf.start + 2 * li + direction
            qv = lay.qf.start + 2 * li + direction
            row = {k: v for k, v in Pc.items()}
            row[pv] = -1.0
            rb.eq(row, 0.0, kind="flow")
            row = {k: v for k, v in Qc.items()}
            row[qv] = -1.0
            rb.eq(row, 0.0, kind="flow")
            pbound = _abs_bound(Pc, wmax)
            qbound = _abs_bound(Qc, wmax)
            pm = min(ln.p_max, pbound) if math.isfinite(ln.p_max) else pbound
            lo[pv], hi[pv] = -pm, pm
            lo[qv], hi[qv] = -qbound, qbound
            _add(inflow_p[a], pv, 1.0)
            _add(inflow_q[a], qv, 1.0)

        if loss_cuts:
            p0, p1 = lay.pf.start + 2 * li, lay.pf.start + 2 * li + 1
            q0, q1 = lay.qf.start + 2 * li, lay.qf.start + 2 * li + 1
            if g >= 0:
                rb.ge({p0: 1.0, p1: 1.0}, 0.0, kind="loss")
            # bus shunts are not part of the flows, so only the series susceptance matters
            if b <= 0:
                rb.ge({q0: 1.0, q1: 1.0}, 0.0, kind="loss")

    # nodal balance:  sum pg - P_D - g_sh |V|^2 = sum_j P_ij ;  sum qg - Q_D + b_sh |V|^2 = sum_j Q_ij
    for k, bus in enumerate(network.buses):
        rowp = {c: -v for c, v in inflow_p[k].items()}
        rowq = {c: -v for c, v in inflow_q[k].items()}
        for gi, gen in enumerate(network.gens):
            if pos[gen.bus] == k:
                _add(rowp, lay.pg.start + gi, 1.0)
                _add(rowq, lay.qg.start + gi, 1.0)
        d = idx.d_axis(k)
        q = idx.q_axis(k)
        for ax in (d, q):
            if ax is None:
                continue
            _add(rowp, idx.flat(ax, ax), -bus.g_sh)
            _add(rowq, idx.flat(ax, ax), bus.b_sh)
        rb.eq(rowp, bus.p_load, kind="balance")
        rb.eq(rowq, bus.q_load, kind="balance")
        mag = {idx.flat(d, d): 1.0}
        if q is not None:
            mag[idx.flat(q, q)] = 1.0
        rb.le(mag, vmax[k] ** 2, kind="vmag")
        rb.ge(mag, vmin[k] ** 2, kind="vmag")

    for k in range(n):
        rb.le({k: 1.0}, hi[k], kind="bound")
        rb.ge({k: 1.0}, lo[k], kind="bound")

    L, l = rb.matrix()
    A = sp.csr_matrix(A)
    A = ((A + A.T) * 0.5).tocsr()
    return LiftedLCQP(A=A, b=bvec, const=const, L=L, l=l, layout=lay, index=idx, lambda_pen=lam, rho=rho,
                      network=network, penalty_form=penalty_form, eq_pairs=rb.eq_pairs, lo=lo, hi=hi,
                      lines=line_terms, minor_cones=minor_cones, row_kinds=rb.kinds)


def penalty_value(x: np.ndarray, lcqp: LiftedLCQP) -> float:
    """Sum of lambda-weighted 2x2 minors of every line.

    Both real blocks for the symmetric and printed forms; the complex line
    minor |V_i|^2 |V_j|^2 - |V_i V_j*|^2 for the complex form.
    """
    x = np.asarray(x, dtype=float)
    if x.size != lcqp.n:
        raise ValueError(f"expected a vector of length {lcqp.n}, got {x.size}")
    idx = lcqp.index
    w = x[lcqp.layout.w]
    total = 0.0
    if lcqp.penalty_form == "complex":
        for ln in lcqp.lines:
            mi, mj, re, im = line_minor_terms(idx, ln.i, ln.j)
            total += ln.lam * (_dot(mi, w) * _dot(mj, w) - _dot(re, w) ** 2 - _dot(im, w) ** 2)
        return float(total)
    for ln in lcqp.lines:
        for axes in (ln.d_axes, ln.q_axes):
            if axes is None:
                continue
            a, c = axes
            total += ln.lam * (w[idx.flat(a, a)] * w[idx.flat(c, c)] - w[idx.flat(a, c)] ** 2)
    return float(total)


def lift_point(lcqp: LiftedLCQP, v_d: np.ndarray, v_q: np.ndarray, pg: Optional[np.ndarray] = None,
               qg: Optional[np.ndarray] = None) -> np.ndarray:
    """Decision vector of the rank-one W built from voltages; flows follow from W.

    ``v_q`` at the reference bus is ignored (the lifted space has no such axis),
    so callers should rotate the voltages first when it matters.
    """
    idx, lay = lcqp.index, lcqp.layout
    v = idx.stack_voltage(np.asarray(v_d, float), np.asarray(v_q, float))
    x = np.zeros(lcqp.n)
    x[lay.w] = idx.from_matrix(np.outer(v, v))
    if pg is not None:
        x[lay.pg] = pg
    if qg is not None:
        x[lay.qg] = qg
    for li, ln in enumerate(lcqp.lines):
        for direction, (a, c) in enumerate(((ln.i, ln.j), (ln.j, ln.i))):
            Pc, Qc = flow_coefficients(idx, a, c, ln.g, ln.b)
            x[lay.pf.start + 2 * li + direction] = sum(v * x[k] for k, v in Pc.items())
            x[lay.qf.start + 2 * li + direction] = sum(v * x[k] for k, v in Qc.items())
    return x


def ac_flows(network: PowerNetwork, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Complex flows S_ij, S_ji per line at complex bus voltages ``v``."""
    pos = network.bus_index()
    out_f = np.zeros(len(network.lines), dtype=complex)
    out_t = np.zeros(len(network.lines), dtype=complex)
    for k, ln in enumerate(network.lines):
        i, j = pos[ln.from_bus], pos[ln.to_bus]
        g, b = line_admittance(ln.r, ln.x)
        y = complex(g, b)
        out_f[k] = v[i] * np.conj(y * (v[i] - v[j]))
        out_t[k] = v[j] * np.conj(y * (v[j] - v[i]))
    return out_f, out_t


def ac_residuals(network: PowerNetwork, v: np.ndarray, pg: np.ndarray, qg: np.ndarray) -> dict:
    """Violations of the AC constraints at complex voltages ``v`` and dispatch (pg, qg)."""
    pos = network.bus_index()
    sf, st = ac_flows(network, v)
    inj = np.zeros(network.n_bus, dtype=complex)
    for k, ln in enumerate(network.lines):
        inj[pos[ln.from_bus]] += sf[k]
        inj[pos[ln.to_bus]] += st[k]
    gen = np.zeros(network.n_bus, dtype=complex)
    for k, g in enumerate(network.gens):
        gen[pos[g.bus]] += complex(pg[k], qg[k])
    load = np.array([complex(b.p_load, b.q_load) for b in network.buses])
    shunt = np.array([complex(b.g_sh, -b.b_sh) for b in network.buses]) * np.abs(v) ** 2
    mis = gen - load - shunt - inj
    vm = np.abs(v)
    vmin = np.array([b.v_min for b in network.buses])
    vmax = np.array([b.v_max for b in network.buses])
    pmax = np.array([ln.p_max for ln in network.lines])
    flow_v = np.maximum(np.abs(np.concatenate([sf.real, st.real])) - np.concatenate([pmax, pmax]), 0.0)
    g_lo = np.array([[g.p_min, g.q_min] for g in network.gens]).reshape(-1, 2)
    g_hi = np.array([[g.p_max, g.q_max] for g in network.gens]).reshape(-1, 2)
    disp = np.stack([pg, qg], axis=1) if len(network.gens) else np.zeros((0, 2))
    return {
        "p_balance": float(np.max(np.abs(mis.real), initial=0.0)),
        "q_balance": float(np.max(np.abs(mis.imag), initial=0.0)),
        "voltage": float(max(np.max(vmin - vm, initial=0.0), np.max(vm - vmax, initial=0.0))),
        "flow_limit": float(np.max(flow_v, initial=0.0)),
        "dispatch": float(max(np.max(g_lo - disp, initial=0.0), np.max(disp - g_hi, initial=0.0))),
    }


def line_products(x: np.ndarray, lcqp: LiftedLCQP) -> tuple[np.ndarray, dict]:
    """|V_i|^2 per bus and V_i V_j* per line endpoint pair, read off W."""
    idx = lcqp.index
    w = np.asarray(x, float)[lcqp.layout.w]
    mag2 = np.empty(idx.n_bus)
    for k in range(idx.n_bus):
        form = {idx.flat(k, k): 1.0}
        q = idx.q_axis(k)
        if q is not None:
            form[idx.flat(q, q)] = 1.0
        mag2[k] = _dot(form, w)
    prods = {}
    for ln in lcqp.lines:
        _, _, re, im = line_minor_terms(idx, ln.i, ln.j)
        prods[(ln.i, ln.j)] = complex(_dot(re, w), _dot(im, w))
    return mag2, prods


def tree_voltages(x: np.ndarray, lcqp: LiftedLCQP) -> np.ndarray:
    """Complex voltages propagated along a spanning tree from the reference bus.

    Magnitudes come from |V_i|^2 and angle differences from V_i V_j* of each
    tree line; exact whenever the line blocks of W are rank one.
    """
    idx = lcqp.index
    N = idx.n_bus
    mag2, prods = line_products(x, lcqp)
    mag = np.sqrt(np.maximum(mag2, 0.0))
    adj = [[] for _ in range(N)]
    for (i, j), s_ij in prods.items():
        adj[i].append((j, s_ij))
        adj[j].append((i, np.conj(s_ij)))
    v = np.zeros(N, dtype=complex)
    seen = np.zeros(N, dtype=bool)
    v[idx.ref] = mag[idx.ref]
    seen[idx.ref] = True
    queue = [idx.ref]
    while queue:
        a = queue.pop(0)
        for c, s_ac in adj[a]:  # s_ac = V_a V_c*
            if seen[c]:
                continue
            ang = np.angle(v[a]) - np.angle(s_ac) if abs(s_ac) > 0 else np.angle(v[a])
            v[c] = mag[c] * np.exp(1j * ang)
            seen[c] = True
            queue.append(c)
    return v


def reassemble(x: np.ndarray, lcqp: LiftedLCQP) -> np.ndarray:
    """Hermitian N x N matrix with entries V_i V_j* taken from W.

    The diagonal and the line entries are what the model pins down; the
    remaining pairs are completed from the spanning-tree voltages.
    """
    mag2, prods = line_products(x, lcqp)
    vt = tree_voltages(x, lcqp)
    H = np.outer(vt, np.conj(vt))
    H[np.diag_indices_from(H)] = mag2
    for (i, j), s_ij in prods.items():
        H[i, j] = s_ij
        H[j, i] = np.conj(s_ij)
    return H


def recover_voltages(x: np.ndarray, lcqp: LiftedLCQP) -> VoltageSolution:
    """Dominant rank-one factor of the reassembled voltage-product matrix.

    The lifted model only fixes quantities invariant under a common phase
    rotation (|V_i|^2 and V_i V_j* on lines), so the factorization is done
    on their Hermitian arrangement rather than on the real W itself.
    """
    x = np.asarray(x, dtype=float)
    lay = lcqp.layout
    H = reassemble(x, lcqp)
    vals, vecs = np.linalg.eigh(H)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    top = vals[0]
    if top <= 0:
        v = np.zeros(H.shape[0], dtype=complex)
        ratio = 1.0
    else:
        v = math.sqrt(top) * vecs[:, 0]
        second = float(np.max(np.abs(vals[1:]), initial=0.0))
        ratio = float(min(1.0, max(0.0, second / top)))
        ref = v[lcqp.index.ref]
        if abs(ref) > 0:
            v = v * np.exp(-1j * np.angle(ref))
            v[lcqp.index.ref] = abs(ref)  # exactly real, not just up to round-off
    res = ac_residuals(lcqp.network, v, x[lay.pg], x[lay.qg])
    return VoltageSolution(v_d=v.real.copy(), v_q=v.imag.copy(), rank_ratio=ratio, residuals=res)


def dump_json(lcqp: LiftedLCQP) -> dict:
    """Plain-data view of the LCQP (COO triplets) for inspection and diffing."""
    A = lcqp.A.tocoo()
    L = lcqp.L.tocoo()
    return {
        "n": lcqp.n,
        "m": lcqp.m,
        "A": {"row": A.row.tolist(), "col": A.col.tolist(), "val": A.data.tolist()},
        "b": lcqp.b.tolist(),
        "const": lcqp.const,
        "L": {"row": L.row.tolist(), "col": L.col.tolist(), "val": L.data.tolist()},
        "l": lcqp.l.tolist(),
        "layout": lcqp.layout.to_dict(),
        "lambda": lcqp.lambda_pen.tolist(),
        "rho": lcqp.rho,
        "penalty_form": lcqp.penalty_form,
    }
