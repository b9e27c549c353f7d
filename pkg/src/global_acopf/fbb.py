"""FSLP-embedded branch and bound over the box of t = Cx, and the brute-force grid oracle.

At a node with box l <= t <= u the nonconvex term -||t||^2 is relaxed by
s_i >= t_i^2 together with the secant s_i <= (l_i + u_i) t_i - l_i u_i:

    v = min  x'A+x + b'x - sum(s)   s.t.  Cx = t, t_i^2 <= s_i <= secant_i, l <= t <= u, x in F

For any relaxation point f(x) - v = sum(s_i - t_i^2) <= ||u - l||^2 / 4, so
boxes shrink until the gap is below epsilon.
"""
from __future__ import annotations

import heapq
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import convex_engine as ce
from .fslp import FslpError, fslp_solve, multistart
from .lifting import VoltageSolution, penalty_value, recover_voltages
from .spectral import LiftedProblem

log = logging.getLogger(__name__)

TRACE_CUTS = ("valid", "printed", "off")
MAX_RESTARTS = 50
DEFAULT_REL_EPSILON = 1e-4
SATURATION = 2 ** 63 - 1


class FbbError(RuntimeError):
    """A node relaxation could not be solved even after a retry."""


class BudgetExceeded(RuntimeError):
    def __init__(self, cells: int, budget: int, saturated: bool = False):
        self.cells = cells
        self.budget = budget
        more = "more than " if saturated else ""
        super().__init__(f"brute force needs {more}{cells} cell relaxations, budget is {budget}")


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float).copy()
        self.hi = np.asarray(self.hi, dtype=float).copy()
        if self.lo.shape != self.hi.shape:
            raise ValueError("box bounds differ in length")
        if np.any(self.lo > self.hi):
            raise ValueError("box has lo > hi")

    @property
    def widths(self) -> np.ndarray:
        return self.hi - self.lo

    def split(self, i: int, beta: float) -> tuple["Box", "Box"]:
        left_hi = self.hi.copy()
        left_hi[i] = beta
        right_lo = self.lo.copy()
        right_lo[i] = beta
        return Box(self.lo, left_hi), Box(right_lo, self.hi)


@dataclass
class NodeSolution:
    v: float
    w: Optional[np.ndarray] = None
    s: Optional[np.ndarray] = None
    t: Optional[np.ndarray] = None
    relax_value: float = math.inf  # secant relaxation alone
    f_w: float = math.inf  # LCQP objective at w

    @property
    def feasible(self) -> bool:
        return math.isfinite(self.v)

    @property
    def excess(self) -> np.ndarray:
        """s_i - t_i^2 per coordinate."""
        return self.s - self.t ** 2


@dataclass(order=True)
class BBNode:
    key: tuple
    id: int = field(compare=False)
    box: Box = field(compare=False)
    sol: NodeSolution = field(compare=False)
    depth: int = field(default=0, compare=False)


@dataclass
class GlobalResult:
    w_star: Optional[np.ndarray]
    v_star: float
    lb: float
    gap_abs: float
    nodes_explored: int
    fslp_restarts: int
    status: str  # Proved, TimeLimit, NodeLimit
    voltage: Optional[VoltageSolution] = None
    epsilon: float = 0.0
    root_bound: float = math.nan
    algorithm: str = "fbb"
    lb_trace: list = field(default_factory=list)
    incumbent_trace: list = field(default_factory=list)  # (v*, penalty) at every incumbent update
    timings: dict = field(default_factory=dict)

    @property
    def proved(self) -> bool:
        return self.status == "Proved"


class NodeCount(int):
    """Integer cell count that remembers whether it was saturated."""

    saturated: bool = False

    def __new__(cls, value: int, saturated: bool = False):
        obj = super().__new__(cls, value)
        obj.saturated = saturated
        return obj


def cells_per_axis(t_lo, t_hi, epsilon: float, r: int) -> list[int]:
    """ceil(sqrt(r) (t_hi - t_lo) / (2 sqrt(eps))) per axis, at least one cell."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    out = []
    for lo, hi in zip(np.atleast_1d(t_lo), np.atleast_1d(t_hi)):
        x = math.sqrt(r) * (float(hi) - float(lo)) / (2.0 * math.sqrt(epsilon))
        # guard against round-off pushing an exact integer over the edge
        out.append(max(1, math.ceil(x * (1.0 - 1e-12))))
    return out


def node_count_bound(t_lo, t_hi, epsilon: float, r: int) -> NodeCount:
    """prod_i ceil(sqrt(r) (t_hi^i - t_lo^i) / (2 sqrt(eps))), saturated at 2^63 - 1."""
    total = 1
    for k in cells_per_axis(t_lo, t_hi, epsilon, r):
        total *= k
        if total > SATURATION:
            return NodeCount(SATURATION, saturated=True)
    return NodeCount(total)


# ----------------------------------------------------------------- relaxation


def build_relaxation(problem: LiftedProblem, box: Box, trace_cut: str = "valid") -> ce.ConvexProgram:
    """Secant relaxation over ``box`` in variables (x, s, t)."""
    if trace_cut not in TRACE_CUTS:
        raise ValueError(f"trace_cut must be one of {TRACE_CUTS}")
    n, r = problem.n, problem.r
    l, u = box.lo, box.hi
    if l.size != r:
        raise ValueError(f"box has {l.size} coordinates, problem has r = {r}")
    C = problem.C
    lin = np.concatenate([problem.b, -np.ones(r), np.zeros(r)])
    R = problem.split.plus_factor
    R = np.hstack([R, np.zeros((R.shape[0], 2 * r))])
    prog = problem.feas.program(lin, q_factor=R, const=problem.const, extra=2 * r)
    N = n + 2 * r
    s_at = lambda i: n + i
    t_at = lambda i: n + r + i
    # t^2 <= s <= (l+u)t - lu already forces l <= t <= u; explicit bounds on top
    # of that make the optimum degenerate at box corners, so they are only kept
    # for (near) zero-width intervals where they pin t
    thin = (u - l) <= 1e-9 * np.maximum(1.0, np.maximum(np.abs(l), np.abs(u)))
    prog.lo[n + r:] = np.where(thin, l, -np.inf)
    prog.hi[n + r:] = np.where(thin, u, np.inf)
    if r:
        eq = np.hstack([C, np.zeros((r, r)), -np.eye(r)])
        prog.a_eq = np.vstack([prog.a_eq, eq])
        prog.b_eq = np.concatenate([prog.b_eq, np.zeros(r)])
    rows, rhs = [], []
    for i in range(r):
        row = np.zeros(N)
        row[s_at(i)] = 1.0
        row[t_at(i)] = -(l[i] + u[i])
        rows.append(row)
        rhs.append(-l[i] * u[i])
        P = np.zeros((1, N))
        P[0, t_at(i)] = 1.0
        q = np.zeros(N)
        q[s_at(i)] = 1.0
        hint = max(abs(l[i]), abs(u[i])) or 1.0
        prog.quad_rows.append(ce.SquaredNormRow(P=P, p0=np.zeros(1), q=q, q0=0.0, scale=hint))
    if r and trace_cut != "off":
        row = np.zeros(N)
        row[n:n + r] = 1.0 / problem.split.lambdas
        if trace_cut == "printed":
            row[:n] = -problem.u_bar
            rows.append(row)
            rhs.append(0.0)
        else:
            # sum (p_i.x)^2 <= |x_S|^2 <= sum_j (lo_j + hi_j) x_j - lo_j hi_j over the support S of C
            support = np.flatnonzero(np.any(C != 0, axis=0))
            lo_s, hi_s = problem.feas.lo[support], problem.feas.hi[support]
            if np.all(np.isfinite(lo_s)) and np.all(np.isfinite(hi_s)):
                row[support] = -(lo_s + hi_s)
                rows.append(row)
                rhs.append(-float(lo_s @ hi_s))
    if rows:
        prog.a_ub = np.vstack([prog.a_ub, np.array(rows)])
        prog.b_ub = np.concatenate([prog.b_ub, rhs])
    return prog


def _minorant_program(problem: LiftedProblem, box: Box) -> ce.ConvexProgram:
    R, b, const = problem.minorant
    prog = problem.feas.program(np.asarray(b, float), q_factor=R, const=const)
    C = problem.C
    prog.a_ub = np.vstack([prog.a_ub, C, -C])
    prog.b_ub = np.concatenate([prog.b_ub, box.hi, -box.lo])
    return prog


def _certified(res: ce.SolveStatus) -> float:
    val = res.obj
    if np.isfinite(res.dual_bound):
        val = min(val, res.dual_bound)
    return float(val)


def _solve_checked(problem: LiftedProblem, prog: ce.ConvexProgram, what: str) -> Optional[ce.SolveStatus]:
    """Solve with one tighter retry; None means infeasible."""
    res = problem.solve(prog)
    if res.status is ce.Status.INFEASIBLE:
        return None
    if res.ok:
        return res
    log.debug("%s: %s (%s), retrying with tighter tolerance", what, res.status.value, res.message)
    res = ce.solve(prog, tol=problem.tol * 0.1, iter_limit=400, backend=problem.backend)
    if res.status is ce.Status.INFEASIBLE:
        return None
    if not res.ok:
        raise FbbError(f"{what} failed twice: {res.status.value} ({res.message})")
    return res


def solve_node(problem: LiftedProblem, box: Box, trace_cut: str = "valid", floor: float = -math.inf
               ) -> NodeSolution:
    """Lower bound over ``box``; infeasible boxes get v = +inf.

    ``floor`` (a parent's bound) is folded in so bounds never decrease
    down the tree. When the problem carries a convex minorant its minimum
    over the box is a second valid bound and the larger one is kept.
    """
    n, r = problem.n, problem.r
    res = _solve_checked(problem, build_relaxation(problem, box, trace_cut), "node relaxation")
    if res is None:
        return NodeSolution(v=math.inf)
    z = res.primal
    w, s, t = z[:n], z[n:n + r], z[n + r:]
    relax = _certified(res)
    v = max(relax, floor)
    if problem.minorant is not None:
        mres = _solve_checked(problem, _minorant_program(problem, box), "node minorant")
        if mres is None:
            return NodeSolution(v=math.inf)
        v = max(v, _certified(mres))
    return NodeSolution(v=v, w=w, s=s, t=t, relax_value=relax, f_w=problem.objective(w))


def select_branch(sol: NodeSolution, box: Box, epsilon: float) -> Optional[tuple[int, float]]:
    """(i*, beta) for the most violated coordinate, or None when sum(s - t^2) <= epsilon."""
    exc = sol.excess
    if exc.size == 0 or float(np.sum(exc)) <= epsilon:
        return None
    i = int(np.argmax(exc))  # first index on ties
    l, u = float(box.lo[i]), float(box.hi[i])
    t, s = float(sol.t[i]), float(sol.s[i])
    mid = 0.5 * (l + u)
    below_left = s > (l + mid) * t - l * mid
    below_right = s > (mid + u) * t - mid * u
    if below_left and below_right:
        return i, mid
    delta = 1e-6 * (u - l)
    return i, float(min(max(t, l + delta), u - delta))


# ------------------------------------------------------------------ drivers


def _penalty(problem: LiftedProblem, w) -> float:
    if problem.lcqp is None or w is None:
        return math.nan
    return penalty_value(w, problem.lcqp)


def _voltage(problem: LiftedProblem, w) -> Optional[VoltageSolution]:
    if problem.lcqp is None or w is None:
        return None
    return recover_voltages(w, problem.lcqp)


def resolve_epsilon(v_init: float, epsilon: Optional[float], rel_epsilon: float) -> float:
    if epsilon is not None:
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        return float(epsilon)
    scale = abs(v_init) if math.isfinite(v_init) else 1.0
    return rel_epsilon * max(1.0, scale)


def fbb_solve(problem: LiftedProblem, epsilon: Optional[float] = None, rel_epsilon: float = DEFAULT_REL_EPSILON,
              time_limit: Optional[float] = None, node_limit: Optional[int] = None, threads: int = 1,
              trace_cut: str = "valid", fslp_epsilon: float = 1e-4, start_cap: int = 5,
              max_restarts: int = MAX_RESTARTS, on_node: Optional[Callable[[BBNode], None]] = None
              ) -> GlobalResult:
    """epsilon-global minimum of the lifted problem.

    ``epsilon`` is absolute; when omitted it is ``rel_epsilon * max(1, |v*|)``
    with v* the best multi-start FSLP value.
    """
    t0 = time.perf_counter()
    deadline = None if time_limit is None else t0 + time_limit
    timings: dict = {}

    # Steps 0-1: multi-start FSLP incumbent
    w_star, v_star = None, math.inf
    incumbent_trace = []
    try:
        _, runs = multistart(problem, epsilon=fslp_epsilon, cap=start_cap)
        # runs are taken in start order so the trace records every improvement
        for run in runs:
            if run.f_star < v_star:
                w_star, v_star = run.w_star, run.f_star
                incumbent_trace.append((v_star, _penalty(problem, w_star)))
    except FslpError as exc:
        log.warning("multi-start FSLP failed (%s); continuing from relaxation points", exc)
    timings["fslp"] = time.perf_counter() - t0
    eps = resolve_epsilon(v_star, epsilon, rel_epsilon)

    def offer(w, f) -> bool:
        nonlocal w_star, v_star
        if w is not None and f < v_star:
            w_star, v_star = w, f
            incumbent_trace.append((f, _penalty(problem, w)))
            return True
        return False

    # Step 2: root
    t1 = time.perf_counter()
    root_box = Box(problem.t_lo, problem.t_hi)
    root = solve_node(problem, root_box, trace_cut)
    timings["root"] = time.perf_counter() - t1
    if not root.feasible:
        raise FbbError("root relaxation is infeasible: the feasible set is empty")
    offer(root.w, root.f_w)
    nodes = 1
    restarts = 0
    next_id = 1
    open_: list[BBNode] = [BBNode((root.v, 0), 0, root_box, root)]
    lb_trace = [root.v]
    closed_lb = math.inf  # bounds of nodes that left the queue without being branched
    status = "Proved"
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None

    def solve_children(boxes, floor):
        if pool is None:
            return [solve_node(problem, b, trace_cut, floor) for b in boxes]
        return list(pool.map(lambda b: solve_node(problem, b, trace_cut, floor), boxes))

    try:
        while open_:
            node = heapq.heappop(open_)
            if node.sol.v >= v_star - eps:
                closed_lb = min(closed_lb, node.sol.v)
                open_.clear()
                break
            if on_node is not None:
                on_node(node)
            sol = node.sol
            # Phase II: node resolved to epsilon
            if sol.f_w - sol.v <= eps:
                offer(sol.w, sol.f_w)
                closed_lb = min(closed_lb, sol.v)
                continue
            choice = select_branch(sol, node.box, eps)
            if choice is None:
                offer(sol.w, sol.f_w)
                closed_lb = min(closed_lb, sol.v)
                continue
            if deadline is not None and time.perf_counter() > deadline:
                heapq.heappush(open_, node)
                status = "TimeLimit"
                break
            if node_limit is not None and nodes >= node_limit:
                heapq.heappush(open_, node)
                status = "NodeLimit"
                break
            i, beta = choice
            children = node.box.split(i, beta)
            sols = solve_children(children, sol.v)
            nodes += len(children)
            # Phase V: FSLP restart from the better child point
            cand = [c for c in sols if c.feasible]
            if cand:
                hat = min(cand, key=lambda c: c.f_w)
                if hat.f_w < v_star and restarts < max_restarts:
                    restarts += 1
                    offer(hat.w, hat.f_w)
                    try:
                        run = fslp_solve(problem, hat.w, fslp_epsilon)
                        offer(run.w_star, run.f_star)
                    except FslpError as exc:
                        log.debug("FSLP restart failed: %s", exc)
                else:
                    offer(hat.w, hat.f_w)
            for box, c in zip(children, sols):
                if c.feasible and c.v < v_star - eps:
                    heapq.heappush(open_, BBNode((c.v, next_id), next_id, box, c, node.depth + 1))
                elif c.feasible:
                    closed_lb = min(closed_lb, c.v)
                next_id += 1
            # Phase VI: prune against the incumbent
            if open_ and any(n_.sol.v >= v_star - eps for n_ in open_):
                closed_lb = min([closed_lb] + [n_.sol.v for n_ in open_ if n_.sol.v >= v_star - eps])
                open_ = [n_ for n_ in open_ if n_.sol.v < v_star - eps]
                heapq.heapify(open_)
            lb_trace.append(min([n_.sol.v for n_ in open_] + [closed_lb, v_star]))
    finally:
        if pool is not None:
            pool.shutdown()

    lb = min([n_.sol.v for n_ in open_] + [closed_lb, v_star])
    timings["bb"] = time.perf_counter() - t1
    timings["total"] = time.perf_counter() - t0
    return GlobalResult(w_star=w_star, v_star=v_star, lb=lb, gap_abs=v_star - lb, nodes_explored=nodes,
                        fslp_restarts=restarts, status=status, voltage=_voltage(problem, w_star), epsilon=eps,
                        root_bound=root.v, algorithm="fbb", lb_trace=lb_trace, incumbent_trace=incumbent_trace,
                        timings=timings)


def brute_force_solve(problem: LiftedProblem, epsilon: float, budget: int = 200_000, trace_cut: str = "valid",
                      threads: int = 1) -> GlobalResult:
    """Relaxation on every cell of the uniform grid over [t_lo, t_hi]; the cell minimum is epsilon-global."""
    t0 = time.perf_counter()
    r = problem.r
    if r < 1:
        raise ValueError("brute force needs at least one negative eigenvalue (r >= 1)")
    count = node_count_bound(problem.t_lo, problem.t_hi, epsilon, r)
    if count > budget:
        raise BudgetExceeded(int(count), budget, count.saturated)
    ks = cells_per_axis(problem.t_lo, problem.t_hi, epsilon, r)
    edges = [np.linspace(lo, hi, k + 1) for lo, hi, k in zip(problem.t_lo, problem.t_hi, ks)]
    boxes = []
    for cell in np.ndindex(*ks):
        lo = np.array([edges[a][c] for a, c in enumerate(cell)])
        hi = np.array([edges[a][c + 1] for a, c in enumerate(cell)])
        boxes.append(Box(lo, hi))

    def one(b):
        return solve_node(problem, b, trace_cut)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            sols = list(pool.map(one, boxes))
    else:
        sols = [one(b) for b in boxes]
    feas = [s for s in sols if s.feasible]
    if not feas:
        raise FbbError("every grid cell is infeasible: the feasible set is empty")
    lb = min(s.v for s in feas)
    best = min(feas, key=lambda s: s.f_w)
    w_star, v_star = best.w, best.f_w
    status = "Proved" if v_star - lb <= epsilon + 1e-9 * max(1.0, abs(v_star)) else "GridGap"
    elapsed = time.perf_counter() - t0
    return GlobalResult(w_star=w_star, v_star=v_star, lb=min(lb, v_star), gap_abs=v_star - min(lb, v_star),
                        nodes_explored=len(boxes), fslp_restarts=0, status=status,
                        voltage=_voltage(problem, w_star), epsilon=epsilon, root_bound=lb, algorithm="brute",
                        lb_trace=[lb], incumbent_trace=[(v_star, _penalty(problem, w_star))],
                        timings={"total": elapsed})
