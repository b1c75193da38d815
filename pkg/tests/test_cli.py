import csv
import io
import json
import subprocess
import sys

import pytest

from _cases import arbitrage_toy, single_bus
from edrelax.casekit import io as caseio
from edrelax.casekit.scenarios import ScenarioSpec, build_counterexample_case, generate_random
from edrelax.cli import DISPATCH_COLUMNS, SWEEP_COLUMNS, main
from edrelax.model import Generator
from edrelax.relaxation import LmpForecast


def _write(tmp_path, case, name="case.json", forecast=None):
    path = tmp_path / name
    path.write_text(caseio.dumps_case(case, forecast))
    return str(path)


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def ieee30_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("ieee") / "ieee30.json"
    assert main(["gen", "ieee30", "--out", str(path)]) == 0
    return str(path)


@pytest.mark.slow
def test_solve_ieee30_writes_96_rows(ieee30_path, tmp_path, capsys):
    out_csv = tmp_path / "dispatch.csv"
    code, _, err = _run(capsys, "solve", ieee30_path, "--csv", str(out_csv), "--out", str(tmp_path / "sol.json"))
    assert code == 0, err
    rows = list(csv.reader(out_csv.open()))
    assert tuple(rows[0]) == DISPATCH_COLUMNS
    assert len(rows) == 97
    assert [int(r[0]) for r in rows[1:]] == list(range(96))
    sol = json.loads((tmp_path / "sol.json").read_text())
    assert sol["status"] == "optimal"


def test_solve_infeasible_exit_2(tmp_path, capsys):
    path = _write(tmp_path, single_bus([500.0], [Generator(0, 0.0, 10.0, c1=1.0)]))
    code, _, err = _run(capsys, "solve", path)
    assert code == 2
    assert "worst-violated block" in err


def test_solve_streams_json(tmp_path, capsys):
    code, out, _ = _run(capsys, "solve", _write(tmp_path, arbitrage_toy()), "--out", "-")
    assert code == 0
    doc = json.loads(out)
    assert caseio.is_solution_document(doc)


def test_solve_ipm_backend(tmp_path, capsys):
    code, _, _ = _run(capsys, "solve", _write(tmp_path, arbitrage_toy()), "--backend", "ipm")
    assert code == 0


def test_check_prints_bound(tmp_path, capsys):
    case = build_counterexample_case()
    fc = tmp_path / "lmp.csv"
    fc.write_text("bus,step,lmp_forecast\n" + "".join(f"{b},{t},20\n" for b in range(2) for t in range(3)))
    code, out, err = _run(capsys, "check", _write(tmp_path, case), "--group", "a", "--forecast", str(fc),
                          "--mape", "0.01")
    # [PAPER] the 19.4 threshold
    assert "lower bound min 19.4 " in err
    assert code == 1  # f' = 24 sits above 19.4
    assert json.loads(out)["conditions"]["A-2"]["satisfied"] is False


def test_check_auto_scenario_two(tmp_path, capsys):
    case = arbitrage_toy()
    path = _write(tmp_path, case, forecast=LmpForecast([[15.0, 18.0]], 0.01))
    code, out, err = _run(capsys, "check", path)
    assert code == 0
    assert json.loads(out)["recommended"] in ("A", "C")


def test_check_counterexample_posteriori(tmp_path, capsys):
    code, out, err = _run(capsys, "check", _write(tmp_path, build_counterexample_case()), "--group", "a",
                          "--posteriori")
    assert code == 1
    assert "A-2 fails" in err
    assert json.loads(out)["mode"] == "a_posteriori"


def test_check_without_forecast_is_usage_error(tmp_path, capsys):
    code, _, err = _run(capsys, "check", _write(tmp_path, arbitrage_toy()))
    assert code == 64 and "--forecast" in err


def test_verify(tmp_path, capsys):
    c_case = generate_random(ScenarioSpec(seed=0, target="satisfy-c"))
    assert _run(capsys, "verify", _write(tmp_path, c_case, "c.json"))[0] == 0
    code, out, err = _run(capsys, "verify", _write(tmp_path, build_counterexample_case(), "x.json"))
    assert code == 1
    assert json.loads(out)["violations"]
    assert "simultaneous charge/discharge" in err
    code, out, _ = _run(capsys, "verify", _write(tmp_path, single_bus([5.0], [Generator(0, 0.0, 10.0)]), "n.json"))
    assert code == 0 and json.loads(out)["max_product"] == 0.0


def test_verify_solution_document(tmp_path, capsys):
    sol_path = tmp_path / "sol.json"
    assert _run(capsys, "solve", _write(tmp_path, build_counterexample_case()), "--out", str(sol_path))[0] == 0
    assert _run(capsys, "verify", str(sol_path))[0] == 1


def test_oracle(tmp_path, capsys, ieee30_path):
    code, out, err = _run(capsys, "oracle", _write(tmp_path, arbitrage_toy(), "toy.json"), "--table")
    assert code == 0
    doc = json.loads(out)
    assert doc["oracle"]["n_patterns"] == 4 and len(doc["oracle"]["table"]) == 4
    code, out, _ = _run(capsys, "oracle", _write(tmp_path, build_counterexample_case(), "x.json"))
    assert code == 1 and json.loads(out)["comparison"]["gap"] > 0
    code, _, err = _run(capsys, "oracle", ieee30_path)
    assert code == 4 and "budget" in err


def test_sweep_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert _run(capsys, "sweep", "--instances", "4", "--seed", "9", "--out", str(a))[0] in (0, 1)
    assert _run(capsys, "sweep", "--instances", "4", "--seed", "9", "--out", str(b))[0] in (0, 1)
    assert a.read_text() == b.read_text()
    rows = list(csv.reader(io.StringIO(a.read_text())))
    assert tuple(rows[0]) == SWEEP_COLUMNS and len(rows) == 5


def test_sweep_satisfy_c_all_exact(capsys):
    code, out, err = _run(capsys, "sweep", "--instances", "5", "--seed", "0", "--target", "satisfy-c")
    assert code == 0
    assert "C 5/5 (100%)" in err


def test_gen_counterexample_round_trips(capsys):
    code, out, _ = _run(capsys, "gen", "counterexample")
    assert code == 0
    assert caseio.parse_case(out).name == "counterexample"


def test_usage_and_missing_file(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["solve"])
    assert exc.value.code == 64
    with pytest.raises(SystemExit) as exc:
        main(["solve", "x.json", "--primal-tol", "-1"])
    assert exc.value.code == 64
    assert _run(capsys, "solve", str(tmp_path / "nope.json"))[0] == 66


def test_bad_json_is_data_error(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert _run(capsys, "solve", str(p))[0] == 65
    p.write_text(json.dumps({"format": "edrelax-case/1"}))
    code, _, err = _run(capsys, "solve", str(p))
    assert code == 65 and "/horizon" in err


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "edrelax", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("solve", "check", "verify", "oracle", "sweep", "gen"):
        assert cmd in res.stdout
