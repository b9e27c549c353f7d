"""D.C. split of the LCQP objective and bounds on the lifted variables t = C x.

    x'Ax = x'A+x - ||Cx||^2,   C rows = sqrt(lambda_i) p_i

where lambda_i > 0 are the magnitudes of the negative eigenvalues of A and
p_i the matching unit eigenvectors.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import convex_engine as ce
from .lifting import LiftedLCQP

log = logging.getLogger(__name__)


class ModelError(RuntimeError):
    """The instance itself is infeasible or ill-posed."""


@dataclass
class SpectralSplit:
    a_plus: np.ndarray
    c_mat: np.ndarray
    lambdas: np.ndarray
    p_vecs: np.ndarray  # r x n unit vectors
    plus_factor: np.ndarray  # R with R'R = a_plus
    eig_tol: float

    @property
    def r(self) -> int:
        return self.lambdas.size


def dc_split(A, eig_tol: Optional[float] = None, rel_tol: float = 1e-9) -> SpectralSplit:
    """Eigen-split a symmetric matrix into A+ (PSD) minus C'C.

    Only the rows/columns carrying nonzeros are factored. Eigenvalues below
    ``-eig_tol`` (default ``rel_tol * ||A||_2``) form C; everything else is
    clamped into A+.
    """
    A = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("A must be square")
    if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max(initial=0.0))):
        raise ValueError("A must be symmetric")
    n = A.shape[0]
    support = np.flatnonzero(np.any(A != 0, axis=0) | np.any(A != 0, axis=1))
    sub = 0.5 * (A[np.ix_(support, support)] + A[np.ix_(support, support)].T)
    try:
        vals, vecs = np.linalg.eigh(sub) if support.size else (np.zeros(0), np.zeros((0, 0)))
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise ce.EngineError(f"eigendecomposition did not converge: {exc}") from exc
    norm2 = float(np.max(np.abs(vals), initial=0.0))
    tol = rel_tol * norm2 if eig_tol is None else float(eig_tol)
    neg = vals < -tol
    pos = vals > 0
    # negative eigenpairs, most negative first
    order = np.flatnonzero(neg)[np.argsort(vals[neg])]
    lambdas = -vals[order]
    P = np.zeros((order.size, n))
    for row, k in enumerate(order):
        p = vecs[:, k].copy()
        if p[np.argmax(np.abs(p))] < 0:
            p = -p
        P[row, support] = p
    C = np.sqrt(lambdas)[:, None] * P
    R = np.zeros((int(pos.sum()), n))
    if pos.any():
        R[:, support] = np.sqrt(vals[pos])[:, None] * vecs[:, pos].T
    a_plus = R.T @ R
    return SpectralSplit(a_plus=a_plus, c_mat=C, lambdas=lambdas, p_vecs=P, plus_factor=R, eig_tol=tol)


@dataclass
class FeasibleSet:
    """``a_ub x <= b_ub, a_eq x = b_eq, lo <= x <= hi`` plus convex cone rows."""

    a_ub: np.ndarray
    b_ub: np.ndarray
    a_eq: np.ndarray
    b_eq: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    quad_rows: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.lo.size

    @classmethod
    def box(cls, lo, hi, a_ub=None, b_ub=None, a_eq=None, b_eq=None) -> "FeasibleSet":
        lo = np.asarray(lo, float)
        n = lo.size
        return cls(a_ub=np.zeros((0, n)) if a_ub is None else np.asarray(a_ub, float).reshape(-1, n),
                   b_ub=np.zeros(0) if b_ub is None else np.asarray(b_ub, float).ravel(),
                   a_eq=np.zeros((0, n)) if a_eq is None else np.asarray(a_eq, float).reshape(-1, n),
                   b_eq=np.zeros(0) if b_eq is None else np.asarray(b_eq, float).ravel(),
                   lo=lo, hi=np.asarray(hi, float))

    @classmethod
    def from_lcqp(cls, lcqp: LiftedLCQP) -> "FeasibleSet":
        a_ub, b_ub, a_eq, b_eq, lo, hi = lcqp.feasible_rows()
        return cls(a_ub=a_ub.toarray(), b_ub=b_ub, a_eq=a_eq.toarray(), b_eq=b_eq, lo=lo, hi=hi,
                   quad_rows=lcqp.cone_rows())

    def program(self, lin, q_mat=None, const: float = 0.0, q_factor=None, extra: int = 0) -> ce.ConvexProgram:
        """Program over (x, y) with ``extra`` free trailing variables y."""
        if extra:
            pad = lambda M: np.hstack([M, np.zeros((M.shape[0], extra))])
            quad = []
            for row in self.quad_rows:
                quad.append(_pad_row(row, extra))
            return ce.ConvexProgram(lin=lin, q_mat=q_mat, q_factor=q_factor, a_ub=pad(self.a_ub), b_ub=self.b_ub,
                                    a_eq=pad(self.a_eq), b_eq=self.b_eq,
                                    lo=np.concatenate([self.lo, np.full(extra, -np.inf)]),
                                    hi=np.concatenate([self.hi, np.full(extra, np.inf)]),
                                    quad_rows=quad, const=const)
        return ce.ConvexProgram(lin=lin, q_mat=q_mat, q_factor=q_factor, a_ub=self.a_ub, b_ub=self.b_ub,
                                a_eq=self.a_eq, b_eq=self.b_eq, lo=self.lo.copy(), hi=self.hi.copy(),
                                quad_rows=list(self.quad_rows), const=const)

    def violation(self, x) -> float:
        return self.program(np.zeros(self.n)).max_violation(x)


def _pad_row(row, extra: int):
    if isinstance(row, ce.QuadFormRow):
        H = np.zeros((row.H.shape[0] + extra,) * 2)
        H[: row.H.shape[0], : row.H.shape[0]] = row.H
        return ce.QuadFormRow(H=H, h=np.concatenate([row.h, np.zeros(extra)]), h0=row.h0)
    P = np.hstack([np.asarray(row.P), np.zeros((np.asarray(row.P).shape[0], extra))])
    return type(row)(P=P, p0=row.p0, q=np.concatenate([row.q, np.zeros(extra)]), q0=row.q0)


@dataclass
class LiftedProblem:
    """Nonconvex QP min x'Ax + b'x + const over a convex set, with its D.C. data."""

    A: np.ndarray
    b: np.ndarray
    const: float
    feas: FeasibleSet
    split: SpectralSplit
    t_lo: np.ndarray
    t_hi: np.ndarray
    u_bar: np.ndarray
    lcqp: Optional[LiftedLCQP] = None
    backend: Optional[str] = None
    tol: float = 1e-8
    # convex quadratic (R, b, const) with f(x) >= |Rx|^2 + b.x + const on the feasible set
    minorant: Optional[tuple] = None

    @property
    def n(self) -> int:
        return self.b.size

    @property
    def r(self) -> int:
        return self.split.r

    @property
    def C(self) -> np.ndarray:
        return self.split.c_mat

    def objective(self, x) -> float:
        x = np.asarray(x, float)
        return float(x @ (self.A @ x) + self.b @ x + self.const)

    def gradient(self, x) -> np.ndarray:
        return 2.0 * (self.A @ x) + self.b

    def solve(self, program: ce.ConvexProgram, iter_limit: int = 200) -> ce.SolveStatus:
        return ce.solve(program, tol=self.tol, iter_limit=iter_limit, backend=self.backend)


def compute_t_bounds(feas: FeasibleSet, split: SpectralSplit, backend: Optional[str] = None, tol: float = 1e-8,
                     threads: int = 1) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Bounds on t = Cx over the feasible set (2r convex programs) and the box maximum u_bar."""
    r = split.r
    C = split.c_mat

    def one(task):
        i, sign = task
        prog = feas.program(sign * C[i])
        res = ce.solve(prog, tol=tol, iter_limit=200, backend=backend)
        if res.status is ce.Status.INFEASIBLE:
            raise ModelError("the feasible set is empty (bound program reported infeasibility)")
        if res.status is ce.Status.UNBOUNDED:
            raise RuntimeError(f"t-bound program {i} is unbounded; the feasible set must be bounded")
        if res.primal is None:
            raise ce.EngineError(f"t-bound program {i} failed: {res.status.value} {res.message}")
        # the dual bound is a certified lower bound on min sign*c_i.x; fall back to the primal value
        val = res.obj
        if np.isfinite(res.dual_bound):
            val = min(val, res.dual_bound)
        return sign * val

    tasks = [(i, s) for i in range(r) for s in (1.0, -1.0)]
    if threads > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            vals = list(pool.map(one, tasks))
    else:
        vals = [one(t) for t in tasks]
    t_lo = np.array(vals[0::2]) if r else np.zeros(0)
    t_hi = np.array(vals[1::2]) if r else np.zeros(0)
    # guard against round-off making an interval cross itself
    mid = 0.5 * (t_lo + t_hi)
    t_lo = np.minimum(t_lo, mid)
    t_hi = np.maximum(t_hi, mid)
    u_bar = feas.hi.copy()
    return t_lo, t_hi, u_bar


def lift_problem(A, b, const: float, feas: FeasibleSet, eig_tol: Optional[float] = None,
                 backend: Optional[str] = None, tol: float = 1e-8, threads: int = 1,
                 lcqp: Optional[LiftedLCQP] = None, minorant: Optional[tuple] = None) -> LiftedProblem:
    A = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)
    split = dc_split(A, eig_tol=eig_tol)
    t_lo, t_hi, u_bar = compute_t_bounds(feas, split, backend=backend, tol=tol, threads=threads)
    return LiftedProblem(A=A, b=np.asarray(b, float), const=float(const), feas=feas, split=split, t_lo=t_lo,
                         t_hi=t_hi, u_bar=u_bar, lcqp=lcqp, backend=backend, tol=tol, minorant=minorant)


def cost_minorant(lcqp: LiftedLCQP) -> Optional[tuple]:
    """Generation cost as a convex minorant of the LCQP objective, when the penalty is provably >= 0."""
    if not lcqp.penalty_nonnegative:
        return None
    A, b, const = lcqp.cost_terms()
    d = A.diagonal()
    if np.any(d < 0):
        return None
    keep = np.flatnonzero(d > 0)
    R = np.zeros((keep.size, lcqp.n))
    R[np.arange(keep.size), keep] = np.sqrt(d[keep])
    return R, b, const


def lift_lcqp(lcqp: LiftedLCQP, eig_tol: Optional[float] = None, backend: Optional[str] = None,
              tol: float = 1e-8, threads: int = 1) -> LiftedProblem:
    """LiftedProblem for an ACOPF LCQP."""
    return lift_problem(lcqp.A, lcqp.b, lcqp.const, FeasibleSet.from_lcqp(lcqp), eig_tol=eig_tol, backend=backend,
                        tol=tol, threads=threads, lcqp=lcqp, minorant=cost_minorant(lcqp))
