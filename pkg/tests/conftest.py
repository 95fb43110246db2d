import copy

import numpy as np
import pytest

from rhomog.problem import load_problem

BASE_1D = {
    "dim": 1,
    "sigma": [["1"]],
    "b": ["0"],
    "c": ["0"],
    "domain": {"shape": "interval", "bounds": [0, 1]},
    "f": "0",
    "g": "0",
    "l": "0",
    "h": "0",
    "mu": 0,
    "beta": -1,
    "growth_C": 1,
    "growth_p": 2,
    "lambda_min": 0.1,
}

GIBBS_1D = dict(BASE_1D, sigma=[["sqrt(2)"]], b=["2*pi*sin(2*pi*y1)"], f="-u", g="-u",
                l="x1*(1-x1)+0.1", h="x1*(1-x1)+0.1-0.05-t", mu=-1, lambda_min=1)


def config(base=BASE_1D, **overrides):
    out = copy.deepcopy(base)
    out.update(overrides)
    return out


def problem(base=BASE_1D, **overrides):
    return load_problem(config(base, **overrides))


@pytest.fixture
def gibbs():
    return load_problem(copy.deepcopy(GIBBS_1D))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
