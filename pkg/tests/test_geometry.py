import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from rhomog.errors import DegeneratePoint, SchemaError
from rhomog.geometry import ConvexDomain

UNIT = ConvexDomain((0.0, 0.0), 1.0)


@pytest.mark.parametrize("x,expected", [((0, 0), 1.0), ((0.6, 0.8), 0.0), ((1.5, 0), -0.5)])
def test_psi(x, expected):
    assert UNIT.psi(x) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("x,expected", [((1, 0), (-1, 0)), ((0.6, 0.8), (-0.6, -0.8))])
def test_grad_psi(x, expected):
    assert np.allclose(UNIT.grad_psi(x), expected, atol=1e-15)


def test_grad_psi_center():
    with pytest.raises(DegeneratePoint):
        UNIT.grad_psi((0.0, 0.0))


@pytest.mark.parametrize("x,expected", [((0.5, 0), (0, 0)), ((2, 0), (2, 0)), ((0, -3), (0, -4))])
def test_delta(x, expected):
    assert np.allclose(UNIT.delta(x), expected, atol=1e-15)


@pytest.mark.parametrize("x,proj,dist", [((0.3, 0.4), (0.3, 0.4), 0.0),
                                         ((1.5, 0), (1, 0), 0.5), ((3, 4), (0.6, 0.8), 4.0)])
def test_project(x, proj, dist):
    p, d = UNIT.project(np.array(x, dtype=float))
    assert np.allclose(p, proj, atol=1e-15)
    assert d == pytest.approx(dist, abs=1e-15)


def test_interval_is_one_ball():
    dom = ConvexDomain.from_config({"shape": "interval", "bounds": [0, 1]})
    assert dom.center == (0.5,) and dom.radius == 0.5
    assert np.allclose(dom.bounds(), [[0, 1]])
    assert np.allclose(dom.grad_psi(np.array([[0.0], [1.0]])), [[1.0], [-1.0]])


@pytest.mark.parametrize("cfg", [{"shape": "box"}, {"shape": "ball", "center": [0]},
                                 {"shape": "ball", "center": [0], "radius": 0}])
def test_bad_config(cfg):
    with pytest.raises(SchemaError):
        ConvexDomain.from_config(cfg)


def test_invariants_on_random_box():
    rng = np.random.default_rng(0)
    dom = ConvexDomain((0.3, -0.2), 0.7)
    x = np.asarray(dom.center) + rng.uniform(-3 * 0.7, 3 * 0.7, size=(10_000, 2))
    g = dom.grad_psi(x)
    assert np.all(np.sum(g * dom.delta(x), axis=1) <= 0)
    assert np.allclose(np.linalg.norm(g, axis=1), 1.0, atol=1e-12)
    proj, dist = dom.project(x)
    out = dom.psi(x) < 0
    assert np.allclose(dom.rho(x[out]), dist[out] ** 2, atol=1e-12)
    again, dist2 = dom.project(proj)
    assert np.array_equal(again, proj) and np.all(dist2 == 0)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 3, elements=st.floats(-10, 10)), st.floats(0.1, 5))
def test_projection_lands_on_closed_ball(x, radius):
    dom = ConvexDomain((0.0, 1.0, -1.0), radius)
    p, d = dom.project(x)
    assert dom.psi(p) >= -1e-12
    assert d == pytest.approx(max(-dom.psi(x), 0.0), abs=1e-12)
    assert np.linalg.norm(p - x) == pytest.approx(d, abs=1e-12)
