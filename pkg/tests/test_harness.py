import json
import math

import numpy as np
import pytest

from conftest import BASE_1D, GIBBS_1D, config
from rhomog import errors
from rhomog.harness import (CSV_FIELDS, ConvergenceReport, ExperimentConfig, emit_report,
                            fit_rate, load_report, report_csv, resolve_problem, run_eps_sweep,
                            run_n_sweep, run_sweep, compare_forward_laws)

FLAT = config(BASE_1D, f="-u", g="-u", mu=-1, l="x1*(1-x1)+0.1", h="x1*(1-x1)+0.1-0.05-t")

SMALL = dict(t=0.25, x0=[0.1], epsilons=[0.5, 0.25, 0.125], n_list=[1, 16, 256], c_dt=0.05,
             n_paths=4000, law_paths=2000, cell_N=64, fd_M=50, fd_dtau=1e-3, gamma_paths=200,
             seed=5)


def test_config_defaults_and_builtin():
    cfg = ExperimentConfig.load("gibbs1d_sweep")
    assert cfg.epsilons == [0.5, 0.25, 0.125, 0.0625]
    assert cfg.dt_for(0.25) == pytest.approx(0.005 * 0.0625)
    assert cfg.hom_dt() == cfg.dt_for(0.0625)
    assert resolve_problem(cfg.problem).name == "gibbs1d"


@pytest.mark.parametrize("bad", [{"epsilons": [0.1, 0.5]}, {"epsilons": [0.5, -0.1]},
                                 {"n_list": [4, 1]}, {"t": 0}])
def test_config_validation(bad):
    with pytest.raises(errors.ValidationError):
        ExperimentConfig(**bad)


def test_unknown_config_key():
    with pytest.raises(errors.SchemaError):
        ExperimentConfig.from_dict({"epsilon": [0.5]})


def test_relative_problem_path(tmp_path):
    (tmp_path / "p.json").write_text(json.dumps(GIBBS_1D))
    (tmp_path / "e.json").write_text(json.dumps({"problem": "p.json", "epsilons": [0.5]}))
    cfg = ExperimentConfig.load(tmp_path / "e.json")
    assert resolve_problem(cfg.problem).d == 1


def test_empty_sweep_has_homogenized_only(tmp_path):
    cfg = ExperimentConfig(problem=GIBBS_1D, **{**SMALL, "epsilons": [], "n_paths": 500})
    rep = run_sweep(cfg)
    assert rep.rows == [] and rep.homogenized["value"] > 0
    assert report_csv(rep) == ",".join(CSV_FIELDS) + "\n"


def test_centering_violation_aborts():
    cfg = ExperimentConfig(problem=config(BASE_1D, b=["0.7"]), **SMALL)
    with pytest.raises(errors.CenteringViolated):
        run_sweep(cfg)


@pytest.fixture(scope="module")
def flat_report():
    return run_n_sweep(ExperimentConfig(problem=FLAT, **SMALL))


def test_no_fast_drift_values_independent_of_eps(flat_report):
    refl = [r for r in flat_report.rows if r["n"] is None]
    u, se_u = flat_report.homogenized["value"], flat_report.homogenized["stderr"]
    for r in refl:
        assert abs(r["value"] - u) <= 3 * math.hypot(r["stderr"], se_u)
    for a, b in zip(refl, refl[1:]):
        assert abs(a["value"] - b["value"]) <= 3 * math.hypot(a["stderr"], b["stderr"])


def test_no_fast_drift_rate_is_flat(flat_report):
    rate = flat_report.rate
    if rate["slope"] is not None:
        assert abs(rate["slope"]) <= 2 * rate["slope_stderr"] or max(rate["gaps"]) < 1e-3


def test_rows_sorted_and_complete(flat_report):
    keys = [(r["epsilon"], r["n"]) for r in flat_report.rows]
    assert keys == [(e, n) for e in (0.5, 0.25, 0.125) for n in (1.0, 16.0, 256.0, None)]
    for r in flat_report.rows:
        assert r["status"] == "ok"
        if r["n"] is None:
            assert r["complementarity"] == 0.0 and r["obstacle_violation"] == 0.0
    assert flat_report.criteria["penalty_monotone"]


def test_report_round_trip(flat_report, tmp_path):
    paths = emit_report(flat_report, tmp_path)
    assert sorted(p.name for p in paths) == ["report.csv", "report.json", "report.plotdata"]
    again = load_report(tmp_path / "report.json")
    emit_report(again, tmp_path / "copy")
    for name in ("report.csv", "report.json", "report.plotdata"):
        assert (tmp_path / name).read_bytes() == (tmp_path / "copy" / name).read_bytes()
    lines = (tmp_path / "report.csv").read_text().splitlines()
    assert len(lines) == 1 + len(flat_report.rows)
    assert lines[4].split(",")[1] == "reflected"


def test_report_schema_check(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schema": 1, "rows": [{"epsilon": 0.5}]}))
    with pytest.raises(errors.SchemaError):
        load_report(bad)
    bad.write_text("{")
    with pytest.raises(errors.SchemaError):
        load_report(bad)


def test_sort_orders_reflected_last():
    rows = [{"epsilon": e, "n": n} for e, n in [(0.25, None), (0.5, 4.0), (0.25, 1.0), (0.5, None)]]
    rep = ConvergenceReport(rows=rows).sort()
    assert [(r["epsilon"], r["n"]) for r in rep.rows] == [(0.5, 4.0), (0.5, None), (0.25, 1.0),
                                                           (0.25, None)]


def test_fit_rate_recovers_slope():
    eps = np.array([0.5, 0.25, 0.125, 0.0625])
    rate = fit_rate(eps, 0.3 * eps ** 1.5, 0.01 * 0.3 * eps ** 1.5)
    assert rate["slope"] == pytest.approx(1.5, abs=1e-10)
    assert fit_rate(eps[:2], eps[:2], eps[:2])["slope"] is None


def test_eps_sweep_only_reflected_rows():
    cfg = ExperimentConfig(problem=FLAT, **{**SMALL, "epsilons": [0.5], "n_paths": 500})
    rep = run_eps_sweep(cfg)
    assert [r["n"] for r in rep.rows] == [None]


def test_forward_laws_without_fast_drift():
    cfg = ExperimentConfig(problem=FLAT, **{**SMALL, "epsilons": [0.5, 0.125]})
    laws = compare_forward_laws(cfg)
    # identical processes: KS inside the null band for 2000 vs 2000 samples
    assert max(laws["rows"][-1]["ks"]) <= 1.36 * math.sqrt(2 / 2000)
