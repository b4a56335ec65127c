import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nnrk.errors import ConfigError
from nnrk.systems import (
    as_state,
    get_system,
    make_linear_family,
    make_linear_system,
    make_pendulum,
    make_vanderpol,
)


def test_linear_eval_and_flow(growth):
    assert growth.eval(np.array([1.0]), np.array([])).tolist() == [1.0]
    assert growth.flow(0.0, np.array([2.5]), np.array([])).tolist() == [2.5]
    series = math.fsum(0.1**n / math.factorial(n) for n in range(20))
    assert growth.flow(0.1, np.array([1.0]), np.array([]))[0] == pytest.approx(series, abs=1e-12)


def test_vanderpol_examples():
    vdp = make_vanderpol()
    assert vdp.eval(np.array([0.0, 0.0]), np.array([1.0])).tolist() == [0.0, 0.0]
    assert vdp.eval(np.array([1.0, 1.0]), np.array([0.0])).tolist() == [1.0, -1.0]
    assert vdp.eval(np.array([2.0, 1.0]), np.array([3.0])).tolist() == [1.0, -11.0]
    assert vdp.exact_flow is None
    with pytest.raises(NotImplementedError):
        vdp.flow(1.0, np.array([1.0, 0.0]), np.array([1.0]))


def test_pendulum_examples():
    pend = make_pendulum()
    assert pend.eval(np.array([0.0, 0.0]), np.array([0.1])).tolist() == [0.0, 0.0]
    np.testing.assert_allclose(pend.eval(np.array([math.pi / 2, 0.0]), np.array([0.0])), [0.0, -1.0])
    np.testing.assert_allclose(pend.eval(np.array([math.pi / 2, 2.0]), np.array([0.5])), [2.0, -2.0])


def test_batched_eval_matches_rowwise():
    vdp = make_vanderpol()
    rng = np.random.default_rng(3)
    xs, ps = rng.normal(size=(6, 2)), rng.uniform(0.5, 2.0, size=(6, 1))
    batch = vdp.eval(xs, ps)
    for i in range(6):
        assert np.array_equal(batch[i], vdp.eval(xs[i], ps[i]))


def test_eval_is_repeatable():
    vdp = make_vanderpol()
    x, p = np.array([0.3, -1.7]), np.array([1.3])
    first = vdp.eval(x, p)
    vdp.eval(np.array([5.0, 5.0]), np.array([2.0]))
    assert np.array_equal(first, vdp.eval(x, p))


@settings(max_examples=200, deadline=None)
@given(
    s=st.floats(0.0, 3.0),
    t=st.floats(0.0, 3.0),
    x=st.floats(-10.0, 10.0),
    lam=st.floats(-2.0, 2.0),
    c=st.floats(-1.0, 1.0),
)
def test_flow_semigroup(s, t, x, lam, c):
    fam = make_linear_family(lam)
    p = np.array([c])
    x0 = np.array([x])
    direct = fam.flow(s + t, x0, p)[0]
    composed = fam.flow(t, fam.flow(s, x0, p), p)[0]
    scale = max(abs(direct), abs(x), abs(c), 1.0)
    assert abs(direct - composed) <= 1e-12 * scale


def test_family_reduces_to_plain_system():
    fam, plain = make_linear_family(1.0), make_linear_system(1.0)
    x = np.array([0.7])
    assert np.array_equal(fam.eval(x, np.array([0.0])), plain.eval(x, np.array([])))
    assert fam.flow(0.4, x, np.array([0.0]))[0] == pytest.approx(plain.flow(0.4, x, np.array([]))[0], rel=1e-15)


def test_state_validation():
    with pytest.raises(ConfigError):
        as_state([1.0, float("nan")])
    with pytest.raises(ConfigError):
        as_state([1.0, 2.0], dim=3)
    assert as_state([[1, 2]]).dtype == np.float64


def test_registry():
    assert get_system("vanderpol").name == "vanderpol"
    with pytest.raises(ConfigError, match="unknown system"):
        get_system("lorenz")
