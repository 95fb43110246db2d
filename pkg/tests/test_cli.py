import csv
import json

import pytest

from conftest import BASE_1D, GIBBS_1D, config
from rhomog.cli import main


@pytest.fixture
def gibbs_file(tmp_path):
    path = tmp_path / "gibbs.json"
    path.write_text(json.dumps(GIBBS_1D))
    return str(path)


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_validate_ok(capsys, gibbs_file):
    code, out, _ = run(capsys, "validate", "--config", gibbs_file, "--samples", "500")
    assert code == 0 and json.loads(out)["passed"]


def test_validate_flags_exit_2(capsys, tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(config(BASE_1D, sigma=[["y1"]])))
    code, out, _ = run(capsys, "validate", "--config", str(path), "--samples", "500")
    assert code == 2 and not json.loads(out)["flags"]["H1_ellipticity"]


@pytest.mark.parametrize("argv", [["validate", "--config", "/nonexistent/p.json"],
                                  ["validate", "--config", "{\"dim\": 1}"],
                                  ["sde", "--config", "gibbs1d", "--eps", "0.1", "--dt", "0.01"]])
def test_invalid_input_exit_2(capsys, argv):
    code, _, err = run(capsys, *argv)
    assert code == 2 and err.startswith("error")


def test_numerical_failure_exit_3(capsys, tmp_path):
    path = tmp_path / "blowup.json"
    path.write_text(json.dumps(config(BASE_1D, c=["1/(x1-0.5)"])))
    code, _, err = run(capsys, "sde", "--config", str(path), "--eps", "1", "--x0", "0.5",
                       "--paths", "10", "--t", "0.01")
    assert code == 3 and "numerical" in err


def test_cell_outputs(capsys, tmp_path):
    code, out, _ = run(capsys, "cell", "--config", "gibbs1d", "--x", "0.3", "--N", "64",
                       "--out", str(tmp_path))
    doc = json.loads(out)
    assert code == 0 and doc["N"] == 64 and len(doc["m"]) == 64
    assert doc["A0_bar"][0][0] == pytest.approx(1.2477, rel=0.01)
    with open(tmp_path / "cell.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["y1", "m", "b_hat1"] and len(rows) == 65


def test_sde_outputs(capsys, tmp_path):
    code, out, _ = run(capsys, "sde", "--config", "gibbs1d", "--eps", "0.25", "--t", "0.05",
                       "--paths", "200", "--out", str(tmp_path))
    doc = json.loads(out)
    assert code == 0 and doc["paths"] == 200 and doc["EG"] >= 0
    with open(tmp_path / "sde_paths.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["path", "k", "t", "x1", "G"] and len(rows) == 1 + 10 * (doc["steps"] + 1)


def test_solve_outputs(capsys, tmp_path):
    common = ["--config", "gibbs1d", "--eps", "0.5", "--t", "0.1", "--paths", "500"]
    code, out, _ = run(capsys, "solve", *common, "--scheme", "penalized", "--n", "16",
                       "--out", str(tmp_path))
    pen = json.loads(out)
    assert code == 0 and pen["scheme"] == "penalized" and pen["n_penalty"] == 16
    assert (tmp_path / "solve_steps.csv").read_text().startswith("k,mean_Y,mean_K,obstacle_violation")
    code, out, _ = run(capsys, "solve", *common, "--scheme", "reflected")
    refl = json.loads(out)
    assert refl["diagnostics"]["complementarity"] == 0.0 and refl["value"] >= pen["value"]


def test_homogenized_solve(capsys):
    code, out, _ = run(capsys, "solve", "--config", "gibbs1d", "--t", "0.1", "--paths", "300",
                       "--N", "64")
    assert code == 0 and json.loads(out)["value"] > 0


def test_oracle(capsys, tmp_path):
    code, out, _ = run(capsys, "oracle", "--config", "gibbs1d", "--x0", "0.1", "--M", "100",
                       "--dtau", "1e-3", "--N", "64", "--out", str(tmp_path))
    doc = json.loads(out)
    assert code == 0 and doc["value"] == pytest.approx(0.1993, abs=2e-3)
    header = (tmp_path / "oracle.csv").read_text().splitlines()[0]
    assert header == "x,u,h,active"


def test_sweep_and_report(capsys, tmp_path):
    exp = tmp_path / "exp.json"
    exp.write_text(json.dumps({"problem": "gibbs1d", "epsilons": [0.5, 0.25], "n_list": [1, 64],
                               "c_dt": 0.05, "n_paths": 400, "law_paths": 200, "cell_N": 64,
                               "fd_M": 50, "fd_dtau": 0.001, "gamma_paths": 100, "seed": 3}))
    code, out, _ = run(capsys, "sweep", "--config", str(exp), "--out", str(tmp_path / "r"))
    assert code == 0 and len(out.split()) == 3
    code, out, _ = run(capsys, "report", "--in", str(tmp_path / "r" / "report.json"))
    assert code == 0 and out == (tmp_path / "r" / "report.csv").read_text()
    code, out, _ = run(capsys, "report", "--in", str(tmp_path / "r" / "report.json"),
                       "--format", "plotdata")
    assert out.startswith("# log_epsilon log_error")


def test_report_rejects_non_report(capsys, tmp_path):
    path = tmp_path / "x.json"
    path.write_text("{}")
    code, _, _ = run(capsys, "report", "--in", str(path))
    assert code == 2
