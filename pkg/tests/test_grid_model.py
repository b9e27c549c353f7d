import json
import math

import pytest
from hypothesis import given, settings, strategies as st

from global_acopf.grid_model import (
    CaseSemanticError,
    CaseSyntaxError,
    SchemaError,
    UnsupportedFeatureError,
    bundled_case_path,
    export_matpower,
    export_native,
    line_admittance,
    load_case,
    networks_equal,
    parse_matpower,
    parse_native,
    single_bus_network,
)

MINI = """
function mpc = mini
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
    1   3   0   0   0   0   1   1   0   230   1   1.1   0.9;
    2   1   50  20  0   0   1   1   0   230   1   1.1   0.9;
];
mpc.gen = [
    1   0   0   100   -100   1   100   1   200   0;
];
mpc.branch = [
    1   2   0.01   0.1   0.02   80   80   80   0   0   1   -360   360;
];
mpc.gencost = [
    2   0   0   2   15   0;
];
"""


def test_line_admittance_examples():
    assert line_admittance(0.0, 1.0) == (0.0, -1.0)
    assert line_admittance(1.0, 0.0) == (1.0, 0.0)
    g, b = line_admittance(0.01, 0.1)
    assert g == pytest.approx(0.01 / 0.0101, rel=1e-14)
    assert b == pytest.approx(-0.1 / 0.0101, rel=1e-14)


def test_zero_impedance_is_rejected():
    with pytest.raises(CaseSemanticError):
        line_admittance(0.0, 0.0)


@given(st.floats(0, 10), st.floats(-10, 10))
def test_conductance_nonnegative_for_nonnegative_resistance(r, x):
    if r * r + x * x == 0:
        return
    g, _ = line_admittance(r, x)
    assert g >= 0


@pytest.mark.parametrize("name, sizes", [("caseWB2", (2, 1, 1)), ("pglib_case5_pjm", (5, 5, 6)),
                                          ("caseWB3", (3, 1, 2)), ("pglib_case3_lmbd", (3, 3, 3))])
def test_bundled_case_sizes(name, sizes):
    net = load_case(name)
    assert (net.n_bus, len(net.gens), len(net.lines)) == sizes


def test_matpower_units_and_charging():
    net = parse_matpower(MINI)
    assert net.buses[1].p_load == pytest.approx(0.5)
    assert net.buses[1].q_load == pytest.approx(0.2)
    # total charging 0.02 split over both ends
    assert net.buses[0].b_sh == pytest.approx(0.01)
    assert net.lines[0].p_max == pytest.approx(0.8)
    # $/MWh on a 100 MVA base becomes $/p.u.
    assert net.gens[0].cost_lin == pytest.approx(1500.0)


def test_dangling_branch_is_a_semantic_error():
    text = MINI.replace("1   2   0.01", "1   7   0.01")
    with pytest.raises(CaseSemanticError):
        parse_matpower(text)


def test_syntax_error_reports_line():
    text = MINI.replace("mpc.bus = [", "mpc.bus = [\n 1 2 abc;")
    with pytest.raises(CaseSyntaxError) as exc:
        parse_matpower(text)
    assert exc.value.line is not None


def test_taps_are_rejected():
    text = MINI.replace("80   80   80   0   0", "80   80   80   0.95   0")
    with pytest.raises(UnsupportedFeatureError):
        parse_matpower(text)


def test_disconnected_network_is_rejected():
    text = MINI.replace("    2   1   50  20", "    3   1   0  0   0   0   1   1   0   230   1   1.1   0.9;\n    2   1   50  20")
    with pytest.raises(CaseSemanticError):
        parse_matpower(text)


def test_native_round_trip_wb2():
    net = load_case("caseWB2")
    again = parse_native(export_native(net))
    assert networks_equal(net, again, tol=1e-12)
    # MATPOWER export closes the loop parse_matpower . export_native . parse_native
    assert networks_equal(net, parse_matpower(export_matpower(again)), tol=1e-12)


def test_missing_ref_bus_is_a_schema_error():
    doc = json.loads(export_native(load_case("caseWB2")))
    del doc["ref_bus"]
    with pytest.raises(SchemaError) as exc:
        parse_native(json.dumps(doc))
    assert exc.value.pointer == "" or exc.value.pointer.startswith("/")


def test_minimal_native_case():
    doc = {"base_mva": 100, "ref_bus": 1,
           "buses": [{"id": 1, "v_min": 0.9, "v_max": 1.1, "p_load": 0.3, "q_load": 0.1, "g_sh": 0, "b_sh": 0}],
           "gens": [{"bus": 1, "p_min": 0, "p_max": 1, "q_min": -1, "q_max": 1, "cost_lin": 10, "cost_quad": 0}],
           "lines": []}
    net = parse_native(json.dumps(doc))
    assert net.n_bus == 1 and not net.lines
    assert networks_equal(net, single_bus_network(0.3, 0.1, 10.0)) or net.gens[0].p_max == 1


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        load_case("missing.m")
    assert bundled_case_path("case5_pjm.m") is not None


def test_network_is_immutable():
    net = load_case("caseWB2")
    with pytest.raises(Exception):
        net.ref_bus = 2  # type: ignore[misc]
    assert isinstance(net.lines, tuple) and math.isfinite(net.lines[0].p_max)
