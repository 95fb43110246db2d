import json

import numpy as np
import pytest

from conftest import BASE_1D, GIBBS_1D, config, problem
from rhomog import errors
from rhomog.problem import load_problem, validate_assumptions


def test_gibbs_loads(gibbs):
    assert gibbs.d == 1
    assert gibbs.has_fast_drift() and not gibbs.depends_on_slow()


def test_load_from_json_text_and_path(tmp_path):
    p = tmp_path / "p.json"
    p.write_text(json.dumps(GIBBS_1D))
    a, b = load_problem(json.dumps(GIBBS_1D)), load_problem(p)
    x = np.linspace(0, 1, 7)[:, None]
    assert np.array_equal(a.l_at(x), b.l_at(x))


def test_round_trip_config(gibbs):
    again = load_problem(gibbs.to_config())
    x = np.linspace(0, 1, 5)[:, None]
    assert np.array_equal(again.b_at(x, x), gibbs.b_at(x, x))


def test_positive_beta():
    with pytest.raises(errors.NonNegativeBeta):
        problem(beta=0.1)


def test_sigma_dimension():
    with pytest.raises(errors.DimensionMismatch):
        problem(sigma=[["1", "0"], ["0", "1"]])


@pytest.mark.parametrize("overrides", [{"dim": 0}, {"sigma": "1"}, {"growth_p": 0.5},
                                       {"lambda_min": 0}, {"domain": {"shape": "torus"}}])
def test_schema_errors(overrides):
    with pytest.raises(errors.SchemaError):
        problem(**overrides)


def test_missing_key():
    cfg = config()
    del cfg["h"]
    with pytest.raises(errors.SchemaError):
        load_problem(cfg)


def test_parse_error_carries_field():
    with pytest.raises(errors.ParseError) as info:
        problem(b=["sin(2*pi*y1"])
    assert info.value.field == "b[0]"


def test_terminal_may_not_use_fast_variable():
    with pytest.raises(errors.ParseError):
        problem(l="y1")


def test_linear_monotone_passes():
    rep = validate_assumptions(problem(f="-u", g="-u", mu=-1, lambda_min=1), samples=2000)
    assert rep.passed


def test_quadratic_f_flagged():
    rep = validate_assumptions(problem(f="u^2", mu=0), samples=2000)
    assert rep.f_monotonicity_defect > 0 and not rep.flags["H4_f_monotone"]


def test_degenerate_sigma_flagged():
    rep = validate_assumptions(problem(sigma=[["y1"]]), samples=2000)
    assert not rep.flags["H1_ellipticity"]


def test_obstacle_order_flagged():
    rep = validate_assumptions(problem(h="1", l="0"), samples=500)
    assert rep.obstacle_margin == pytest.approx(-1.0)
    assert not rep.flags["H5_obstacle_below_terminal"]


def test_nonperiodic_flagged():
    rep = validate_assumptions(problem(b=["y1"]), samples=500)
    assert not rep.flags["H2_periodicity"]


def test_validation_deterministic(gibbs):
    a = validate_assumptions(gibbs, samples=1000, rng_seed=3).to_dict()
    b = validate_assumptions(gibbs, samples=1000, rng_seed=3).to_dict()
    assert a == b


@pytest.mark.parametrize("overrides,flag", [
    ({"f": "-u", "mu": -1}, None),
    ({"f": "u^2", "mu": 0}, "H4_f_monotone"),
    ({"sigma": [["y1"]]}, "H1_ellipticity"),
])
def test_verdict_independent_of_seed(overrides, flag):
    verdicts = set()
    for seed in (0, 1, 2):
        rep = validate_assumptions(problem(**overrides), samples=2000, rng_seed=seed)
        verdicts.add(rep.passed if flag is None else rep.flags[flag])
    assert len(verdicts) == 1


def test_gibbs_validates(gibbs):
    assert validate_assumptions(gibbs, samples=2000).passed
