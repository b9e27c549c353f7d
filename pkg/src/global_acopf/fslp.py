"""Feasible successive linear programming on the bi-convex reformulation.

With t = Cx the objective splits as

    f(x) = x'A+x + b'x - ||Cx||^2 = min_t  x'A+x + b'x - 2 t'Cx + ||t||^2

(the inner minimum is attained at t = Cx). FSLP alternates: fix t^k, solve
the convex QP in x, set t^{k+1} = C x^{k+1}. Every step decreases f by at
least ||t^{k+1} - t^k||^2.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, Optional

import numpy as np

from . import convex_engine as ce
from .spectral import LiftedProblem

log = logging.getLogger(__name__)

DEFAULT_MAX_ITER = 200


class FslpError(RuntimeError):
    def __init__(self, message: str, iteration: int):
        self.iteration = iteration
        super().__init__(f"iteration {iteration}: {message}")


@dataclass
class FslpState:
    k: int
    w_cur: np.ndarray
    t_cur: np.ndarray
    f_cur: float
    history: list = field(default_factory=list)


@dataclass
class FslpResult:
    w_star: np.ndarray
    f_star: float
    iters: int
    converged: bool
    descent_log: list  # (f, ||dt||) per iteration, starting with the initial point
    t_history: list = field(default_factory=list)

    @property
    def t_star(self) -> np.ndarray:
        return self.t_history[-1]


def build_biconvex_subproblem(problem: LiftedProblem, t_k: np.ndarray, w_k: Optional[np.ndarray] = None
                              ) -> ce.ConvexProgram:
    """Convex program in (x, t, z) for fixed t = t_k.

    The objective is x'A+x + b'x - 2z + ||t||^2 with t pinned to t_k by its
    bounds and z = t_k'Cx by an equality row. With t fixed the linearized
    coupling cut coincides with that equality and the Young bound
    z <= ||t||^2/2 + ||Cx||^2/2 always holds, so the program is exactly the
    convex QP of the alternating step.
    """
    n, r = problem.n, problem.r
    t_k = np.asarray(t_k, dtype=float)
    C = problem.C
    lin = np.concatenate([problem.b, np.zeros(r), [-2.0]])
    R = np.hstack([problem.split.plus_factor, np.zeros((problem.split.plus_factor.shape[0], r + 1))])
    prog = problem.feas.program(lin, q_factor=R, const=problem.const + float(t_k @ t_k), extra=r + 1)
    # pin t and tie z to t_k'Cx
    prog.lo[n:n + r] = t_k
    prog.hi[n:n + r] = t_k
    row = np.concatenate([t_k @ C, np.zeros(r), [-1.0]])[None, :]
    prog.a_eq = np.vstack([prog.a_eq, row])
    prog.b_eq = np.concatenate([prog.b_eq, [0.0]])
    return prog


def subproblem_objective(problem: LiftedProblem, x: np.ndarray, t: np.ndarray) -> float:
    """x'A+x + b'x - 2 t'Cx + ||t||^2 (+const) = f(x) + ||Cx - t||^2."""
    x = np.asarray(x, float)
    return float(x @ (problem.split.a_plus @ x) + problem.b @ x - 2.0 * t @ (problem.C @ x) + t @ t + problem.const)


def solve_at(problem: LiftedProblem, t_k: np.ndarray, iteration: int = 0) -> np.ndarray:
    """x(t) = argmin over the feasible set of f(x) + ||Cx - t||^2."""
    prog = build_biconvex_subproblem(problem, t_k)
    res = problem.solve(prog)
    if not res.ok:
        raise FslpError(f"subproblem {res.status.value} ({res.message})", iteration)
    return res.primal[: problem.n]


def project_feasible(problem: LiftedProblem, w0: np.ndarray) -> np.ndarray:
    """Closest feasible point in the l1 sense (one convex program with n slacks)."""
    n = problem.n
    w0 = np.asarray(w0, float)
    if problem.feas.violation(w0) <= 1e-9:
        return w0
    # variables (x, e):  e >= x - w0,  e >= w0 - x
    lin = np.concatenate([np.zeros(n), np.ones(n)])
    prog = problem.feas.program(lin, extra=n)
    eye = np.eye(n)
    rows = np.vstack([np.hstack([eye, -eye]), np.hstack([-eye, -eye])])
    prog.a_ub = np.vstack([prog.a_ub, rows])
    prog.b_ub = np.concatenate([prog.b_ub, w0, -w0])
    res = problem.solve(prog)
    if not res.ok:
        raise FslpError(f"projection onto the feasible set failed ({res.status.value})", 0)
    return res.primal[:n]


def fslp_solve(problem: LiftedProblem, w0: np.ndarray, epsilon: float = 1e-4, max_iter: int = DEFAULT_MAX_ITER,
               callback: Optional[Callable[[FslpState], None]] = None) -> FslpResult:
    """Run FSLP from ``w0`` until ||t^{k+1} - t^k|| <= sqrt(epsilon) or ``max_iter``."""
    x = project_feasible(problem, w0)
    C = problem.C
    t = C @ x
    f = problem.objective(x)
    log_ = [(f, 0.0)]
    ts = [t.copy()]
    best_x, best_f = x, f
    stop = np.sqrt(epsilon)
    converged = False
    k = 0
    if problem.r == 0:
        # convex: a single solve reaches the optimum
        x = solve_at(problem, t, 1)
        f = problem.objective(x)
        log_.append((f, 0.0))
        ts.append(C @ x)
        return FslpResult(w_star=x, f_star=f, iters=1, converged=True, descent_log=log_, t_history=ts)
    for k in range(1, max_iter + 1):
        x_new = solve_at(problem, t, k)
        t_new = C @ x_new
        f_new = problem.objective(x_new)
        step = float(np.linalg.norm(t_new - t))
        log_.append((f_new, step))
        ts.append(t_new.copy())
        x, t, f = x_new, t_new, f_new
        if f < best_f:
            best_x, best_f = x, f
        if callback is not None:
            callback(FslpState(k=k, w_cur=x, t_cur=t, f_cur=f, history=log_))
        if step <= stop:
            converged = True
            break
    if converged:
        return FslpResult(w_star=x, f_star=f, iters=k, converged=True, descent_log=log_, t_history=ts)
    return FslpResult(w_star=best_x, f_star=best_f, iters=k, converged=False, descent_log=log_, t_history=ts)


def start_directions(r: int, cap: int = 5) -> list[np.ndarray]:
    """Sign vectors for the multi-start: all 2^r when r <= cap, else +1 and -1."""
    if r == 0:
        return []
    if r <= cap:
        return [np.array(s, dtype=float) for s in product((1.0, -1.0), repeat=r)]
    return [np.ones(r), -np.ones(r)]


def init_points(problem: LiftedProblem, cap: int = 5) -> list[np.ndarray]:
    """Starting points from min mu'Cx over the feasible set for each sign vector mu."""
    if problem.r == 0:
        prog = problem.feas.program(np.zeros(problem.n))
        res = problem.solve(prog)
        if not res.ok:
            raise FslpError(f"feasibility program {res.status.value}", 0)
        return [res.primal]
    out = []
    for mu in start_directions(problem.r, cap):
        res = problem.solve(problem.feas.program(mu @ problem.C))
        if not res.ok:
            raise FslpError(f"start program {res.status.value}", 0)
        out.append(res.primal)
    return out


def multistart(problem: LiftedProblem, epsilon: float = 1e-4, cap: int = 5, max_iter: int = DEFAULT_MAX_ITER
               ) -> tuple[FslpResult, list[FslpResult]]:
    """FSLP from every start; best result by lowest objective, then lowest index."""
    runs = [fslp_solve(problem, w0, epsilon, max_iter) for w0 in init_points(problem, cap)]
    best = min(range(len(runs)), key=lambda i: (runs[i].f_star, i))
    return runs[best], runs


def kkt_residual(problem: LiftedProblem, x: np.ndarray, tol: Optional[float] = None) -> float:
    """Stationarity residual of the original nonconvex QP at x.

    Solves the convex step at t = Cx; at a fixed point its optimality
    conditions coincide with those of the LCQP, so the distance moved is
    the residual.
    """
    t = problem.C @ x
    x_new = solve_at(problem, t)
    return float(np.linalg.norm(x_new - x, np.inf))
