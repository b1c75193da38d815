import json
import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _cases import single_bus
from edrelax import qp as Q
from edrelax.casekit import io as caseio
from edrelax.casekit.matpower import MatpowerFormatError, load_case30_text, parse_matpower_subset
from edrelax.casekit.scenarios import (
    TARGETS,
    ScenarioSpec,
    build_counterexample_case,
    build_ieee30_scenario,
    generate_random,
)
from edrelax.model import Generator, case_fingerprint, validate_case
from edrelax.relaxation import LmpForecast, check_conditions_a, check_posteriori

TOY = """function mpc = toy
mpc.version = '2';
mpc.baseMVA = 100;
%% bus data
mpc.bus = [
	1	3	0	0	0	0	1	1	0	135	1	1.05	0.95;
	2	1	40	10	0	0	1	1	0	135	1	1.05	0.95;
];
mpc.gen = [
	1	50	0	100	-100	1	100	1	150	10	0	0	0	0	0	0	0	0	0	0	0;
];
mpc.branch = [
	1	2	0.01	0.2	0	75	75	75	0	0	1	-360	360;
];
"""


def test_matpower_two_bus_toy():
    skel = parse_matpower_subset(TOY)
    assert skel.network.n_buses == 2 and skel.network.n_lines == 1
    ln = skel.network.lines[0]
    assert (ln.from_bus, ln.to_bus, ln.reactance, ln.flow_max) == (0, 1, 0.2, 75.0)
    assert skel.generators[0].p_max == 150.0 and skel.generators[0].p_min == 10.0
    np.testing.assert_array_equal(skel.base_load, [0.0, 40.0])
    assert skel.network.slack_bus == 0


def test_matpower_case30_counts():
    text = load_case30_text()
    skel = parse_matpower_subset(text)
    # [DERIVED] count rows of the distributed file independently of the parser
    branch_block = re.search(r"mpc\.branch\s*=\s*\[(.*?)\];", text, re.S).group(1)
    rows = [r for r in (line.split("%")[0].strip() for line in branch_block.splitlines()) if r]
    assert skel.network.n_buses == 30
    assert skel.network.n_lines == len(rows) == 41


def test_matpower_malformed_row_reports_line():
    bad = TOY.replace("2	1	40	10", "2	1	4x0	10")
    with pytest.raises(MatpowerFormatError, match=r"line 7"):
        parse_matpower_subset(bad)


def test_matpower_ragged_row():
    bad = TOY.replace("	1	3	0	0	0	0	1	1	0	135	1	1.05	0.95;", "	1	3	0	0;")
    with pytest.raises(MatpowerFormatError, match="columns"):
        parse_matpower_subset(bad)


def test_matpower_unrecognized_format():
    with pytest.raises(MatpowerFormatError, match="unrecognized format"):
        parse_matpower_subset("x = [1 2 3];\n")


def test_matpower_inconsistent_numbering():
    bad = TOY.replace("	1	2	0.01	0.2", "	1	7	0.01	0.2")
    with pytest.raises(MatpowerFormatError, match="inconsistent bus numbering"):
        parse_matpower_subset(bad)


@pytest.fixture(scope="module")
def ieee30():
    return build_ieee30_scenario()


def test_ieee30_units_and_buses(ieee30):
    skel = parse_matpower_subset(load_case30_text())
    thermal = [g for g in ieee30.generators if g.kind != "wind"]
    # [PAPER] units at buses 1, 13, 22, 23, 27 and wind at bus 2
    assert [skel.bus_ids[g.bus] for g in thermal] == [1, 13, 22, 23, 27]
    wind = [g for g in ieee30.generators if g.kind == "wind"]
    assert [skel.bus_ids[g.bus] for g in wind] == [2]
    # [PAPER] reference unit data: unit 5 costs 0.01x^2 + 10x, unit 1 ramps 5 MW per 15 min
    assert (thermal[4].c2, thermal[4].c1) == (0.01, 10.0)
    assert (thermal[0].p_min, thermal[0].p_max, thermal[0].ramp_up) == (20.0, 100.0, 5.0)
    assert (thermal[2].c2, thermal[2].c1, thermal[2].ramp_up) == (0.02, 23.0, 8.0)
    assert ieee30.horizon.dt == 0.25 and ieee30.T == 96


def test_ieee30_storages(ieee30):
    skel = parse_matpower_subset(load_case30_text())
    # [PAPER] 50 storages on the PQ buses
    assert ieee30.n_storages == 50
    assert all(skel.bus_types[s.bus] == 1 for s in ieee30.storages)
    st0 = ieee30.storages[0]
    assert st0.e0 == 0.5 * st0.e_max[0]
    assert st0.xi == pytest.approx(0.99 ** 0.25)


def test_ieee30_load_peak(ieee30):
    total = ieee30.loads.total
    assert total.max() == pytest.approx(0.8 * 520.0)
    assert validate_case(ieee30) == []


def test_counterexample_conditions():
    case = build_counterexample_case()
    sol = Q.solve_case(case)
    rep = check_posteriori(sol, case, "A")
    # [PAPER] A-1 holds while A-2 fails
    assert rep.satisfied1 and not rep.satisfied2
    assert check_conditions_a(case.prices, case.storages, np.full((2, case.T), 24.0)).satisfied1


def test_generate_random_deterministic():
    a = generate_random(ScenarioSpec(seed=42))
    b = generate_random(ScenarioSpec(seed=42))
    assert case_fingerprint(a) == case_fingerprint(b)
    assert caseio.dumps_case(a) == caseio.dumps_case(b)


@settings(max_examples=8)
@given(st.integers(0, 10 ** 6), st.sampled_from(TARGETS))
def test_generate_random_targets(seed, target):
    case = generate_random(ScenarioSpec(seed=seed, target=target))
    assert [v for v in validate_case(case) if v.severity == "error"] == []
    assert case.n_storages * case.T <= 6
    sol = Q.solve_case(case)
    assert sol.optimal
    group = {"satisfy-a": "A", "satisfy-b": "B", "satisfy-c": "C"}.get(target)
    if group:
        assert check_posteriori(sol, case, group).satisfied
    if target == "violate-a2":
        assert not check_posteriori(sol, case, "A").satisfied2


def test_scenario_spec_rejects_bad_values():
    with pytest.raises(ValueError):
        ScenarioSpec(seed=0, target="satisfy-d")
    with pytest.raises(ValueError):
        ScenarioSpec(seed=0, steps=9)


MINIMAL = {
    "format": "edrelax-case/1",
    "horizon": {"steps": 2, "dt": 1.0},
    "buses": {"count": 1},
    "lines": [],
    "generators": [{"bus": 0, "p_min": 0, "p_max": 100, "c1": 10}],
    "storages": [{"bus": 0, "ch_max": 5, "dc_max": 5, "eta_ch": 0.9, "eta_dc": 0.9, "self_discharge": 0,
                  "e0": 0, "e_min": 0, "e_max": 10, "e_req": -100000}],
    "prices": {"scenario": 2, "f_slope": 0, "g2": 0, "g1": 0},
    "loads": [[20, 30]],
}


def test_parse_minimal_document():
    case = caseio.parse_case(json.dumps(MINIMAL))
    assert case.T == 2 and case.n_storages == 1
    np.testing.assert_array_equal(case.storages[0].ch_max, [5.0, 5.0])
    assert Q.solve_case(case).optimal


def test_missing_eta_dc_names_path():
    doc = json.loads(json.dumps(MINIMAL))
    del doc["storages"][0]["eta_dc"]
    with pytest.raises(caseio.CaseFormatError) as exc:
        caseio.parse_case(doc)
    assert exc.value.path == "/storages/0/eta_dc"


def test_wrong_length_vector():
    doc = json.loads(json.dumps(MINIMAL))
    doc["storages"][0]["ch_max"] = [1, 2, 3]
    with pytest.raises(caseio.CaseFormatError, match="storages/0/ch_max"):
        caseio.parse_case(doc)


def test_ieee30_round_trip(ieee30):
    doc = caseio.serialize_case(ieee30)
    again = caseio.serialize_case(caseio.parse_case(json.loads(json.dumps(doc))))
    assert again == doc
    assert case_fingerprint(caseio.parse_case(doc)) == case_fingerprint(ieee30)


@pytest.mark.parametrize("build", [build_counterexample_case, lambda: generate_random(ScenarioSpec(seed=3)),
                                   lambda: single_bus([5.0], [Generator(0, 0.0, 10.0, c1=1.0)])])
def test_builder_round_trip(build):
    case = build()
    back = caseio.parse_case(caseio.dumps_case(case))
    assert case_fingerprint(back) == case_fingerprint(case)


def test_forecast_section_round_trip():
    case = build_counterexample_case()
    fc = LmpForecast(np.full((2, 3), 20.0), 0.01)
    parsed, back = caseio.parse_document(caseio.dumps_case(case, fc))
    assert back.mape == 0.01
    np.testing.assert_array_equal(back.values, fc.values)
    _, none = caseio.parse_document(caseio.dumps_case(case))
    assert none is None


def test_solution_round_trip():
    case = build_counterexample_case()
    sol = Q.solve_case(case)
    doc = json.loads(json.dumps(caseio.serialize_solution(sol)))
    assert caseio.is_solution_document(doc)
    back = caseio.parse_solution(doc)
    np.testing.assert_array_equal(back.p_ch, sol.p_ch)
    np.testing.assert_array_equal(back.duals.lam, sol.duals.lam)
    assert back.status == sol.status and back.fingerprint == sol.fingerprint
    assert not caseio.is_solution_document(caseio.serialize_case(case))
