import math

import numpy as np
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hbaforecast.evaluation import climatology, evaluate, persistence


def test_perfect_and_shifted_forecasts():
    obs = np.array([3.0, 0.0, 7.0, 2.0])
    s = evaluate(obs, obs)
    assert s.mspe == 0.0 and math.isclose(s.corr, 1.0)
    s = evaluate(obs + 2.5, obs)
    assert math.isclose(s.mspe, 6.25) and math.isclose(s.corr, 1.0)


def test_zero_variance_correlation_undefined():
    s = evaluate(np.array([1.0, 2.0, 3.0]), np.full(3, 4.0))
    assert not s.corr_defined and s.mspe > 0


vec = arrays(np.float64, 6, elements=st.floats(0, 100))


@given(vec, vec)
def test_symmetry(p, o):
    a, b = evaluate(p, o), evaluate(o, p)
    assert a.mspe == b.mspe
    assert (math.isnan(a.corr) and math.isnan(b.corr)) or math.isclose(a.corr, b.corr)


def test_baselines_on_constant_counts():
    y = np.full((5, 8), 6)
    for grids in (climatology(y), persistence(y)):
        assert evaluate(grids.mean, y[:, 0]).mspe == 0.0
        assert np.all(grids.lower <= grids.mean) and np.all(grids.mean <= grids.upper)
        assert grids.table().shape == (5, 3)


def test_baselines_use_training_mean_and_last_year():
    y = np.array([[1, 2, 9], [0, 0, 0]])
    assert np.allclose(climatology(y).mean, [4.0, 0.0])
    assert np.allclose(persistence(y).mean, [9.0, 0.0])
    assert persistence(y).upper[1] == 0.0
