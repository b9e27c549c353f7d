import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from global_acopf.grid_model import Bus, Generator, Line, PowerNetwork, load_case, single_bus_network
from global_acopf.lifting import (
    build_index_map,
    build_lcqp,
    dump_json,
    lift_point,
    penalty_value,
    penalty_weight,
    recover_voltages,
)
from global_acopf.spectral import FeasibleSet
from global_acopf import convex_engine as ce

from oracles import random_network, random_voltages


def two_bus(g_sh=0.0, b_sh=0.0):
    buses = [Bus(1, 0.9, 1.1, g_sh=g_sh, b_sh=b_sh), Bus(2, 0.9, 1.1, p_load=0.5, q_load=0.1)]
    gens = [Generator(1, 0.0, 2.0, -2.0, 2.0, 10.0)]
    return PowerNetwork(buses=buses, gens=gens, lines=[Line(1, 2, 0.02, 0.2, 2.0)], ref_bus=1)


@pytest.mark.parametrize("n_bus, dim, n_w", [(2, 3, 6), (1, 1, 1), (14, 27, 378)])
def test_index_map_sizes(n_bus, dim, n_w):
    idx = build_index_map(n_bus)
    assert idx.dim == dim and idx.n_w == n_w


@given(st.integers(1, 9), st.data())
def test_index_map_is_a_bijection(n_bus, data):
    ref = data.draw(st.integers(0, n_bus - 1))
    idx = build_index_map(n_bus, ref)
    flats = sorted(idx.flat(p, q) for p, q in idx.pairs())
    assert flats == list(range(idx.n_w))
    for k in range(idx.n_w):
        assert idx.flat(*idx.pair(k)) == k


def test_penalty_weight_example():
    assert penalty_weight(0.0, 1.0, 0.0, -2.0, 1000.0) == pytest.approx(5000.0)


def test_layout_size_and_symmetry():
    lcqp = build_lcqp(load_case("caseWB3"))
    net = lcqp.network
    assert lcqp.n == lcqp.index.n_w + 2 * len(net.gens) + 4 * len(net.lines)
    assert (lcqp.A - lcqp.A.T).count_nonzero() == 0


def test_single_bus_optimum_is_load_cost():
    net = single_bus_network(0.7, 0.2, cost_lin=3.0)
    lcqp = build_lcqp(net)
    res = ce.solve(lcqp.program(lin=lcqp.b), tol=1e-9)
    assert res.ok
    assert res.obj + lcqp.const == pytest.approx(3.0 * 0.7, abs=1e-7)
    assert lcqp.lines == [] and not lcqp.A.count_nonzero()


def test_penalty_rank_one_vanishes_symmetric():
    lcqp = build_lcqp(two_bus(), penalty_form="symmetric")
    x = lift_point(lcqp, np.array([1.0, 2.0]), np.zeros(2))
    assert penalty_value(x, lcqp) == pytest.approx(0.0, abs=1e-12)


def test_penalty_identity_block_symmetric():
    lcqp = build_lcqp(two_bus(), penalty_form="symmetric")
    x = np.zeros(lcqp.n)
    x[lcqp.layout.w] = lcqp.index.from_matrix(np.eye(lcqp.index.dim))
    lam = lcqp.lines[0].lam
    # only the d-block minor exists (the reference q axis is removed): 1*1 - 0
    assert penalty_value(x, lcqp) / lam == pytest.approx(1.0)


def test_penalty_complex_vanishes_on_rank_one():
    rng = np.random.default_rng(3)
    net = random_network(3, n_bus=4, extra_lines=2)
    lcqp = build_lcqp(net)
    v = random_voltages(rng, net.n_bus)
    x = lift_point(lcqp, v.real, v.imag)
    assert abs(penalty_value(x, lcqp)) <= 1e-9 * max(1.0, lcqp.lambda_pen.max())


def test_penalty_dimension_mismatch():
    lcqp = build_lcqp(two_bus())
    with pytest.raises(ValueError):
        penalty_value(np.zeros(lcqp.n + 1), lcqp)


@pytest.mark.parametrize("form", ["complex", "symmetric"])
def test_objective_equals_cost_on_rank_one_points(form):
    rng = np.random.default_rng(11)
    net = random_network(11, n_bus=3, extra_lines=1)
    lcqp = build_lcqp(net, penalty_form=form)
    for _ in range(20):
        v = random_voltages(rng, net.n_bus)
        pg = rng.uniform(0, 1, len(net.gens))
        x = lift_point(lcqp, v.real, v.imag, pg=pg, qg=np.zeros(len(net.gens)))
        cost = sum(g.cost_lin * p + g.cost_quad * p * p + g.cost_const for g, p in zip(net.gens, pg))
        assert lcqp.objective(x) == pytest.approx(cost, abs=1e-9 * max(1.0, lcqp.lambda_pen.max()))


def test_recover_rank_one_voltages():
    lcqp = build_lcqp(two_bus())
    v = np.array([0.9, 0.1])
    x = lift_point(lcqp, v, np.zeros(2))
    sol = recover_voltages(x, lcqp)
    assert sol.rank_ratio == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(np.abs(sol.v_d), v, atol=1e-12)
    assert sol.v_q[lcqp.index.ref] == 0.0 and sol.v_d[lcqp.index.ref] >= 0


def test_recover_identity_has_no_certificate():
    lcqp = build_lcqp(two_bus())
    x = np.zeros(lcqp.n)
    x[lcqp.layout.w] = lcqp.index.from_matrix(np.eye(lcqp.index.dim))
    sol = recover_voltages(x, lcqp)
    # |V1|^2 = 1, |V2|^2 = 2, V1 V2* = 0: eigenvalues 2 and 1
    assert sol.rank_ratio == pytest.approx(0.5)
    assert 0.0 <= sol.rank_ratio <= 1.0


def test_feasible_set_is_bounded():
    lcqp = build_lcqp(load_case("caseWB3"))
    assert np.all(np.isfinite(lcqp.lo)) and np.all(np.isfinite(lcqp.hi))
    feas = FeasibleSet.from_lcqp(lcqp)
    for k in (0, lcqp.layout.pf.start, lcqp.n - 1):
        for sign in (1.0, -1.0):
            lin = np.zeros(lcqp.n)
            lin[k] = sign
            res = ce.solve(feas.program(lin), tol=1e-8)
            assert res.ok and np.isfinite(res.obj)


def test_rank_one_points_satisfy_cones_and_loss_cuts():
    rng = np.random.default_rng(5)
    net = random_network(5, n_bus=4, extra_lines=2)
    lcqp = build_lcqp(net)
    kinds = np.array(lcqp.row_kinds)
    loss = np.flatnonzero(kinds == "loss")
    assert loss.size == 2 * len(net.lines)  # inductive lines: both P and Q cuts
    for _ in range(50):
        v = random_voltages(rng, net.n_bus)
        x = lift_point(lcqp, v.real, v.imag)
        assert np.all(lcqp.L[loss] @ x <= lcqp.l[loss] + 1e-10)
        for row in lcqp.cone_rows():
            assert np.linalg.norm(row.P @ x + row.p0) <= row.q @ x + row.q0 + 1e-10


def test_capacitive_lines_get_no_reactive_cut():
    net = random_network(7, n_bus=3, extra_lines=0, capacitive=True)
    lcqp = build_lcqp(net)
    assert lcqp.row_kinds.count("loss") == len(net.lines)


def test_dump_is_json_serializable():
    doc = dump_json(build_lcqp(load_case("caseWB2")))
    text = json.dumps(doc)
    back = json.loads(text)
    assert back["n"] == doc["n"] and len(back["l"]) == back["m"]
    assert set(back["layout"]) >= {"w", "pg", "qg", "pf", "qf"}


def test_invalid_options():
    with pytest.raises(ValueError):
        build_lcqp(two_bus(), rho=0.0)
    with pytest.raises(ValueError):
        build_lcqp(two_bus(), penalty_form="cubic")
