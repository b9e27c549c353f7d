import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from global_acopf.grid_model import load_case
from global_acopf.lifting import build_lcqp
from global_acopf.spectral import FeasibleSet, compute_t_bounds, dc_split, lift_lcqp, lift_problem


def test_split_diag_indefinite():
    sp_ = dc_split(np.diag([1.0, -2.0]))
    assert sp_.r == 1
    assert sp_.lambdas[0] == pytest.approx(2.0)
    assert np.allclose(sp_.c_mat, [[0.0, np.sqrt(2.0)]])
    assert np.allclose(sp_.a_plus, np.diag([1.0, 0.0]))


def test_split_convex_case():
    A = np.diag([3.0, 5.0])
    sp_ = dc_split(A)
    assert sp_.r == 0 and sp_.c_mat.shape == (0, 2)
    assert np.allclose(sp_.a_plus, A)


def test_split_off_diagonal():
    A = np.array([[0.0, -0.5], [-0.5, 0.0]])
    sp_ = dc_split(A)
    assert sp_.r == 1 and sp_.lambdas[0] == pytest.approx(0.5)
    assert np.allclose(sp_.c_mat, [[0.5, 0.5]])
    assert np.allclose(sp_.a_plus - sp_.c_mat.T @ sp_.c_mat, A)


def test_split_rejects_asymmetric():
    with pytest.raises(ValueError):
        dc_split(np.array([[0.0, 1.0], [0.0, 0.0]]))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2 ** 32 - 1))
def test_split_reconstructs_quadratic_form(n, seed):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((n, n))
    A = 0.5 * (M + M.T)
    sp_ = dc_split(A)
    assert np.max(np.abs(A - (sp_.a_plus - sp_.c_mat.T @ sp_.c_mat))) <= 1e-8 * (1 + np.abs(A).max())
    assert np.linalg.eigvalsh(sp_.a_plus).min() >= -1e-8
    assert np.allclose(np.linalg.norm(sp_.p_vecs, axis=1), 1.0)
    x = rng.standard_normal(n)
    assert x @ A @ x == pytest.approx(x @ sp_.a_plus @ x - np.sum((sp_.c_mat @ x) ** 2), abs=1e-8 * (1 + x @ x))
    # r agrees with a dense eigensolver
    vals = np.linalg.eigvalsh(A)
    assert sp_.r == int(np.sum(vals < -sp_.eig_tol))


def test_t_bounds_on_unit_box():
    feas = FeasibleSet.box([0.0, 0.0], [1.0, 1.0])
    lo, hi, ubar = compute_t_bounds(feas, dc_split(np.diag([1.0, -2.0])))
    assert lo[0] == pytest.approx(0.0, abs=1e-7) and hi[0] == pytest.approx(np.sqrt(2.0), abs=1e-7)
    assert np.allclose(ubar, 1.0)


def test_t_bounds_empty_for_convex():
    feas = FeasibleSet.box([0.0], [1.0])
    lo, hi, _ = compute_t_bounds(feas, dc_split(np.eye(1)))
    assert lo.size == 0 and hi.size == 0


def test_wb2_bounds_contain_feasible_points():
    problem = lift_lcqp(build_lcqp(load_case("caseWB2")))
    assert np.all(np.isfinite(problem.t_lo)) and np.all(problem.t_lo <= problem.t_hi)
    # extreme points of the feasible set in random directions stay inside the t box
    rng = np.random.default_rng(0)
    for _ in range(10):
        res = problem.solve(problem.feas.program(rng.standard_normal(problem.n)))
        t = problem.C @ res.primal
        assert np.all(t >= problem.t_lo - 1e-6) and np.all(t <= problem.t_hi + 1e-6)


def test_empty_feasible_set_is_a_model_error():
    from global_acopf.spectral import ModelError

    feas = FeasibleSet.box([0.0, 0.0], [1.0, 1.0], a_ub=[[1.0, 1.0]], b_ub=[-1.0])
    with pytest.raises(ModelError):
        lift_problem(np.diag([1.0, -1.0]), np.zeros(2), 0.0, feas)
