import math

import numpy as np
import pytest

from global_acopf import convex_engine as ce
from global_acopf.fbb import (
    Box,
    BudgetExceeded,
    NodeSolution,
    brute_force_solve,
    build_relaxation,
    cells_per_axis,
    fbb_solve,
    node_count_bound,
    select_branch,
    solve_node,
)
from global_acopf.spectral import FeasibleSet, lift_problem

from oracles import box_qp_global_min, example_grid_oracle, example_problem, lift_box, random_box_lcqp


def test_node_count_examples():
    assert node_count_bound([0.0], [2.0], 1.0, 1) == 1
    assert node_count_bound([0.0] * 4, [2.0] * 4, 0.01, 4) == 160000
    assert node_count_bound([0.0], [math.sqrt(2.0)], 0.5, 1) == 1
    assert node_count_bound([0.0, 0.0], [4.0, 4.0], 0.01, 2) == 29 ** 2
    assert cells_per_axis([0.0, 0.0], [4.0, 4.0], 0.01, 2) == [29, 29]


def test_node_count_saturates():
    n = node_count_bound([0.0] * 10, [1e6] * 10, 1e-8, 10)
    assert n.saturated and n == 2 ** 63 - 1
    with pytest.raises(ValueError):
        node_count_bound([0.0], [1.0], 0.0, 1)


def one_d_problem(lo=0.0, hi=2.0):
    # f(x) = -x^2 on [lo, hi]: C = [1], t = x
    return lift_problem(np.array([[-1.0]]), np.zeros(1), 0.0, FeasibleSet.box([lo], [hi]))


def test_select_branch_midpoint_examples():
    box = Box([0.0], [2.0])
    assert select_branch(NodeSolution(v=0.0, s=np.array([2.0]), t=np.array([1.0])), box, 1e-3) == (0, 1.0)
    assert select_branch(NodeSolution(v=0.0, s=np.array([0.5]), t=np.array([0.2])), box, 1e-3) == (0, 1.0)


def test_select_branch_at_relaxation_point():
    # (1.5, 2.4) lies above the parabola and violates the left midpoint secant (s <= 1.5)
    # but not the right one (s <= 2.5), so the split happens at t itself
    box = Box([0.0], [2.0])
    i, beta = select_branch(NodeSolution(v=0.0, s=np.array([2.4]), t=np.array([1.5])), box, 1e-3)
    assert i == 0 and beta == pytest.approx(1.5)


def test_select_branch_ties_and_resolved():
    box = Box([0.0, 0.0], [2.0, 2.0])
    sol = NodeSolution(v=0.0, s=np.array([2.0, 2.0]), t=np.array([1.0, 1.0]))
    assert select_branch(sol, box, 1e-3)[0] == 0
    tiny = NodeSolution(v=0.0, s=np.array([1.0 + 1e-5, 1.0]), t=np.array([1.0, 1.0]))
    assert select_branch(tiny, box, 1e-3) is None


def test_relaxation_gap_on_unit_secant():
    problem = one_d_problem()
    prog = build_relaxation(problem, Box([0.0], [2.0]))
    n, r = problem.n, problem.r
    # maximize s - t^2 over the relaxation rows
    lin = np.zeros(prog.n)
    lin[n] = -1.0
    q = np.zeros((prog.n, prog.n))
    q[n + r, n + r] = 1.0
    prog.lin, prog.q_mat, prog.q_factor, prog.const = lin, q, None, 0.0
    res = ce.solve(prog)
    assert res.ok
    assert res.obj == pytest.approx(-1.0, abs=1e-6)
    assert res.primal[n + r] == pytest.approx(1.0, abs=1e-5) and res.primal[n] == pytest.approx(2.0, abs=1e-5)
    ts = np.linspace(0, 2, 20001)
    assert np.max(2 * ts - ts * ts) == pytest.approx(-res.obj, abs=1e-6)


def test_concave_relaxation_reaches_endpoint():
    # for f = -x^2 the secant bound is exact at the endpoints
    sol = solve_node(one_d_problem(), Box([0.0], [2.0]))
    assert sol.v == pytest.approx(-4.0, abs=1e-6)


def test_degenerate_box_has_no_gap():
    problem = one_d_problem()
    sol = solve_node(problem, Box([1.5], [1.5]))
    assert sol.s[0] == pytest.approx(2.25, abs=1e-6)
    assert sol.v == pytest.approx(problem.objective(sol.w), abs=1e-6)


def test_infeasible_box_is_pruned():
    problem = lift_problem(np.diag([1.0, -1.0]), np.zeros(2), 0.0,
                           FeasibleSet.box([0.0, 0.0], [1.0, 1.0], a_ub=[[0.0, 1.0]], b_ub=[0.5]))
    sol = solve_node(problem, Box([0.9], [1.0]))
    assert sol.v == math.inf and not sol.feasible


def test_relaxation_variables_and_bounds():
    problem = lift_box(*random_box_lcqp(3, n=3, r=2))
    prog = build_relaxation(problem, Box(problem.t_lo, problem.t_hi))
    assert prog.n == problem.n + 2 * problem.r
    assert len(prog.quad_rows) >= problem.r


def test_small_boxes_are_epsilon_resolved():
    problem = lift_box(*random_box_lcqp(11, n=3, r=2, t_range=2.0))
    eps = 1e-2
    width = 2.0 * math.sqrt(eps / problem.r)
    rng = np.random.default_rng(0)
    for _ in range(10):
        lo = rng.uniform(problem.t_lo, problem.t_hi - width)
        sol = solve_node(problem, Box(lo, lo + width))
        if sol.feasible:
            assert float(np.sum(sol.excess)) <= eps + 1e-7
            assert select_branch(sol, Box(lo, lo + width), eps) is None


def test_gap_bound_at_nodes():
    problem = one_d_problem(-1.0, 3.0)
    for lo, hi in [(-1.0, 3.0), (0.0, 1.0), (2.0, 2.5)]:
        sol = solve_node(problem, Box([lo], [hi]))
        assert sol.f_w - sol.relax_value <= (hi - lo) ** 2 / 4 + 1e-6


def test_convex_instance_is_solved_at_root():
    A = np.diag([1.0, 2.0])
    b = np.array([-1.0, 1.0])
    problem = lift_box(A, b, -np.ones(2), np.ones(2))
    res = fbb_solve(problem, epsilon=1e-6)
    assert res.proved and res.nodes_explored == 1
    assert res.v_star == pytest.approx(box_qp_global_min(A, b, -np.ones(2), np.ones(2))[1], abs=1e-6)


def test_concave_one_d():
    res = fbb_solve(one_d_problem(-1.0, 3.0), epsilon=1e-6)
    assert res.proved and res.v_star == pytest.approx(-9.0, abs=1e-6)
    assert res.lb <= res.v_star and res.gap_abs <= 1e-6


@pytest.mark.parametrize("seed", range(6))
def test_fbb_sandwich_and_monotone_traces(seed):
    A, b, lo, hi = random_box_lcqp(600 + seed, t_range=2.0)
    problem = lift_box(A, b, lo, hi)
    eps = 1e-3
    res = fbb_solve(problem, epsilon=eps)
    _, f_true = box_qp_global_min(A, b, lo, hi)
    assert res.proved
    assert res.lb <= f_true + 1e-6 and f_true <= res.v_star + 1e-6
    assert res.v_star - f_true <= eps + 1e-6
    assert all(b2 >= b1 - 1e-9 for b1, b2 in zip(res.lb_trace, res.lb_trace[1:]))
    vs = [v for v, _ in res.incumbent_trace]
    assert all(v2 <= v1 for v1, v2 in zip(vs, vs[1:]))
    assert problem.feas.violation(res.w_star) <= 1e-7
    assert res.nodes_explored <= 2 * max(1, int(node_count_bound(problem.t_lo, problem.t_hi, eps, problem.r)))


def test_node_limit_status():
    problem = lift_box(*random_box_lcqp(1003, t_range=2.0))
    res = fbb_solve(problem, epsilon=1e-6, node_limit=3)
    assert res.status == "NodeLimit"
    assert res.lb <= res.v_star


def test_brute_force_matches_fbb_on_example_like_instance():
    A, b, lo, hi = random_box_lcqp(1001)
    problem = lift_box(A, b, lo, hi)
    eps = 1e-3
    br = brute_force_solve(problem, eps)
    fb = fbb_solve(problem, epsilon=eps)
    assert br.nodes_explored == node_count_bound(problem.t_lo, problem.t_hi, eps, problem.r)
    assert abs(br.v_star - fb.v_star) <= 2 * eps


def test_brute_force_refusals():
    problem = lift_box(*random_box_lcqp(1001))
    with pytest.raises(BudgetExceeded) as exc:
        brute_force_solve(problem, 1e-8, budget=10)
    assert str(exc.value.cells) in str(exc.value)
    convex = lift_box(np.eye(2), np.zeros(2), -np.ones(2), np.ones(2))
    with pytest.raises(ValueError):
        brute_force_solve(convex, 1e-3)


def test_example_problem_root_bound_below_grid():
    problem = example_problem()
    res = fbb_solve(problem, epsilon=1e-4)
    _, f_grid = example_grid_oracle(1e-3)
    assert res.root_bound <= f_grid + 1e-6
    assert res.proved and abs(res.v_star - f_grid) <= 1e-3


def test_engine_default_is_reference():
    assert ce.get_default_backend() == "reference"


@pytest.mark.parametrize("seed", range(10))
def test_valid_trace_cut_keeps_the_optimum(seed):
    A, b, lo, hi = random_box_lcqp(800 + seed, t_range=2.0)
    problem = lift_box(A, b, lo, hi)
    _, f_true = box_qp_global_min(A, b, lo, hi)
    for cut in ("valid", "off"):
        sol = solve_node(problem, Box(problem.t_lo, problem.t_hi), trace_cut=cut)
        assert sol.v <= f_true + 1e-6


def test_unknown_trace_cut():
    problem = one_d_problem()
    with pytest.raises(ValueError):
        build_relaxation(problem, Box([0.0], [2.0]), trace_cut="bogus")
