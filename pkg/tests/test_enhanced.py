import csv
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ConstantNet, HalfStateNet
from nnrk.enhanced import (
    BoundParams,
    HybridConfig,
    calibrate_delta_max,
    enhanced_integrate,
    enhanced_step,
    error_bound,
    fallback_rate,
    hybrid_integrate,
    hybrid_step,
    norm_normalized,
    normalize_discrepancy,
    scaling_factors,
    write_hybrid_report,
)
from nnrk.errors import ConfigError, CorrectionError
from nnrk.learning import TrainConfig, build_dataset, train
from nnrk.mlp import mlp_new
from nnrk.rk import (
    get_tableau,
    integrate,
    rk_step,
    tableau_euler,
    tableau_euler_heun_embedded,
    tableau_heun,
    tableau_heun_rk3_embedded,
)
from nnrk.systems import make_linear_family, make_linear_system, make_pendulum, make_vanderpol

NO_P = np.zeros(0)


class PairOracle:
    """Returns the embedded pair's own estimate scaled by 1/h^(p+1)."""

    def __init__(self, sys, pair, h):
        self.sys, self.pair, self.h = sys, pair, h

    def __call__(self, x, p):
        res = rk_step(self.sys, self.pair, x, p, self.h)
        return (res.next - res.next_embedded) / self.h ** (self.pair.order_embedded + 1)


class FlowOracle:
    """Exact scaled local error of a base scheme on a system with a closed-form flow."""

    def __init__(self, sys, tab, h, shift=0.0):
        self.sys, self.tab, self.h, self.shift = sys, tab, h, shift

    def __call__(self, x, p):
        base = rk_step(self.sys, self.tab, x, p, self.h, embedded=False).next
        exact = self.sys.flow(self.h, x, p)
        return (exact - base) / self.h ** (self.tab.order + 1) + self.shift


def test_zero_net_reduces_to_base_step(growth):
    x = np.array([1.3])
    assert np.array_equal(
        enhanced_step(growth, tableau_heun(), ConstantNet([0.0]), x, NO_P, 0.1),
        rk_step(growth, tableau_heun(), x, NO_P, 0.1).next,
    )


def test_half_state_net_cancels_leading_error(growth):
    x1 = enhanced_step(growth, tableau_euler(), HalfStateNet(), np.array([1.0]), NO_P, 0.1)
    assert x1[0] == pytest.approx(1.105, abs=1e-15)
    assert math.exp(0.1) - x1[0] == pytest.approx(1.71e-4, abs=1e-6)


def test_correction_vanishes_with_h(growth):
    net = ConstantNet([3.0])
    for h in (0.1, 0.01, 0.001):
        diff = enhanced_step(growth, tableau_heun(), net, np.array([1.0]), NO_P, h) - rk_step(
            growth, tableau_heun(), np.array([1.0]), NO_P, h
        ).next
        assert abs(diff[0]) <= h**3 * 3.0 + 4e-16  # subtraction round-off


def test_nonfinite_correction_is_typed(growth):
    with pytest.raises(CorrectionError) as info:
        enhanced_integrate(growth, tableau_euler(), ConstantNet([np.nan]), np.array([1.0]), NO_P, 0.1, 5)
    assert info.value.step == 0


def test_correction_shape_checked(growth):
    with pytest.raises(ConfigError):
        enhanced_step(growth, tableau_euler(), lambda x, p: np.zeros(2), np.array([1.0]), NO_P, 0.1)


def test_error_bound_examples():
    assert error_bound(BoundParams(1.0, 0.0, 1e-3, 1, 0.1), 9) == pytest.approx(1e-4, abs=1e-16)
    half = BoundParams(0.5, 0.0, 1e-3, 1, 0.1)
    assert error_bound(half, 0) == error_bound(half, 500) == pytest.approx(2e-3 * 1e-2, abs=1e-16)
    grow = BoundParams(1.1, 0.0, 1e-3, 1, 0.1)
    assert error_bound(grow, 9) == pytest.approx((math.e - 1) / 0.1 * 1e-3 * 1e-2, rel=1e-12)
    assert (math.e - 1) / 0.1 == pytest.approx(17.18, abs=5e-3)
    with pytest.raises(ValueError):
        error_bound(BoundParams(0.0, 0.0, 1e-3, 1, 0.1), 1)
    with pytest.raises(ValueError):
        error_bound(half, -1)
    with pytest.raises(ValueError):
        BoundParams(0.5, 1.0, 0.0, 1, 0.1)


def _bound_run(h, lip_net, eps_nn, n=200):
    """Enhanced Euler on x' = -x with a perfect correction shifted by 0.999 eps_nn."""
    decay = make_linear_system(-1.0)
    net = FlowOracle(decay, tableau_euler(), h, shift=0.999 * eps_nn)
    traj = enhanced_integrate(decay, tableau_euler(), net, np.array([1.0]), NO_P, h, n)
    exact = np.exp(-h * np.arange(n + 1))
    errors = np.abs(traj.states[:, 0] - exact)
    bp = BoundParams(abs(1 - h), lip_net, eps_nn, 1, h)
    bounds = np.array([error_bound(bp, k) for k in range(n)])
    return bp, errors[1:], bounds


@pytest.mark.parametrize("eps_nn", [1e-3, 1e-4])
def test_bound_holds_contractive_regime(eps_nn):
    h = 0.1
    true_lip = abs((math.exp(-h) - (1 - h)) / h**2)
    bp, errors, bounds = _bound_run(h, true_lip, eps_nn)
    assert bp.alpha < 1
    assert np.all(errors <= bounds)
    assert errors[-1] > 0.5 * bounds[-1]  # the bound is not vacuous here


@pytest.mark.parametrize("eps_nn", [1e-3, 1e-4])
def test_bound_holds_neutral_regime(eps_nn):
    bp, errors, bounds = _bound_run(0.5, 2.0, eps_nn)
    assert bp.alpha == 1.0
    assert np.all(errors <= bounds)


def test_scaling_factor_examples():
    cfg = HybridConfig(atol=1e-6, rtol=1e-3)
    sc = scaling_factors(np.array([2.0]), np.array([2.1]), cfg)
    assert sc[0] == pytest.approx(2.101e-3, abs=1e-15)
    sc = scaling_factors(np.array([-3.0, 0.5]), np.array([1.0, -0.7]), HybridConfig(atol=[1e-4, 2e-4], rtol=0.0))
    assert sc.tolist() == [1e-4, 2e-4]
    sc = scaling_factors(np.zeros(1), np.zeros(1), HybridConfig(atol=0.0, rtol=1e-3))
    assert sc.tolist() == [0.0]


def test_normalize_discrepancy_zero_guard():
    out = normalize_discrepancy(np.array([0.0, 1.0, 2.0]), np.array([0.0, 0.0, 4.0]))
    assert out[0] == 0.0 and out[1] == math.inf and out[2] == 0.5


def test_norm_examples():
    v = np.array([3.0, -4.0])
    assert norm_normalized(v, "max") == 4.0
    assert norm_normalized(v, "averaged-l2") == pytest.approx(math.sqrt(12.5), rel=1e-15)
    assert norm_normalized(np.zeros(3), "max") == norm_normalized(np.zeros(3), "averaged-l2") == 0.0
    with pytest.raises(ConfigError):
        norm_normalized(v, "l1")


@settings(max_examples=300, deadline=None)
@given(
    delta=st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=6),
    sc_seed=st.integers(0, 2**31),
    dmax=st.floats(0.0, 10.0),
)
def test_max_norm_semantics(delta, sc_seed, dmax):
    delta = np.array(delta)
    sc = np.random.default_rng(sc_seed).uniform(1e-3, 10.0, size=delta.size)
    lhs = norm_normalized(normalize_discrepancy(delta, sc), "max") <= dmax
    rhs = bool(np.all(np.abs(delta / sc) <= dmax))
    assert lhs == rhs


def test_hybrid_config_validation():
    with pytest.raises(ConfigError):
        HybridConfig(kappa=0.9)
    with pytest.raises(ConfigError):
        HybridConfig(atol=0.0, rtol=0.0)
    with pytest.raises(ConfigError):
        HybridConfig(atol=-1.0)
    with pytest.raises(ConfigError):
        HybridConfig(norm_kind="l1")


def _linear_euler_dataset(h=0.1):
    fam = make_linear_family(1.0)
    grid = [[v] for v in np.linspace(-0.5, 0.0, 6)]
    return fam, build_dataset(fam, tableau_euler(), grid, [0.5], h, 2.0, 1e-3)


def test_calibration_oracle_is_zero_and_linear_in_kappa():
    fam, ds = _linear_euler_dataset()
    pair = tableau_euler_heun_embedded()
    oracle = PairOracle(fam, pair, ds.h)
    assert calibrate_delta_max(oracle, ds, fam, pair, HybridConfig(kappa=3.0)) == 0.0
    net = ConstantNet([0.2])
    one = calibrate_delta_max(net, ds, fam, pair, HybridConfig(kappa=1.0))
    two = calibrate_delta_max(net, ds, fam, pair, HybridConfig(kappa=2.0))
    assert two == 2 * one > 0


def test_calibration_matches_brute_force_for_trained_net():
    fam, ds = _linear_euler_dataset()
    val_fam, val = _linear_euler_dataset()
    net = train(mlp_new([2, 16, 16, 1], 0), ds, val, TrainConfig(epochs=300, batch_size=32, lr=3e-3, weight_decay=0.0)).net
    pair = tableau_euler_heun_embedded()
    cfg = HybridConfig(atol=1e-6, rtol=1e-3, kappa=1.2)
    dmax = calibrate_delta_max(net, ds, fam, pair, cfg)
    worst = 0.0
    for s in ds.samples():
        res = rk_step(fam, pair, s.state, s.params, ds.h)
        eps = res.next - res.next_embedded
        delta = eps - ds.h**2 * net(s.state, s.params)
        sc = 1e-6 + np.maximum(np.abs(s.state), np.abs(res.next)) * 1e-3
        worst = max(worst, float(np.max(np.abs(delta / sc))))
    assert dmax == pytest.approx(1.2 * worst, rel=1e-12)
    assert math.isfinite(dmax) and dmax < 1


def test_calibration_checks_scheme():
    fam, ds = _linear_euler_dataset()
    with pytest.raises(ConfigError):
        calibrate_delta_max(ConstantNet([0.0]), ds, fam, tableau_heun_rk3_embedded(), HybridConfig())
    with pytest.raises(ConfigError):
        calibrate_delta_max(ConstantNet([0.0]), ds, fam, tableau_euler(), HybridConfig())
    with pytest.raises(ConfigError):
        calibrate_delta_max(ConstantNet([0.0, 0.0]), ds, make_vanderpol(), tableau_euler_heun_embedded(), HybridConfig())


def test_hybrid_zero_net_large_threshold_is_heun(growth):
    cfg = HybridConfig(delta_max=1e30)
    traj, recs = hybrid_integrate(growth, tableau_heun_rk3_embedded(), ConstantNet([0.0]), np.array([1.0]), NO_P, 0.1, 20, cfg)
    heun = integrate(growth, tableau_heun(), np.array([1.0]), NO_P, 0.1, 20)
    assert np.array_equal(traj.states, heun.states)
    assert all(r.used_network for r in recs)
    assert fallback_rate(recs) == 0.0


@pytest.mark.parametrize(
    "sys,x0,p",
    [
        (make_linear_family(1.0), [0.5], [-0.2]),
        (make_vanderpol(), [2.0, 0.5], [1.0]),
        (make_pendulum(), [1.0, 0.5], [0.1]),
    ],
)
def test_hybrid_garbage_net_is_rk3_bitwise(sys, x0, p):
    x0, p = np.array(x0), np.array(p)
    cfg = HybridConfig(delta_max=1.0)
    garbage = ConstantNet(np.full(sys.state_dim, 1e6))
    traj, recs = hybrid_integrate(sys, tableau_heun_rk3_embedded(), garbage, x0, p, 0.05, 100, cfg)
    rk3 = integrate(sys, tableau_heun_rk3_embedded(), x0, p, 0.05, 100)
    assert np.array_equal(traj.states, rk3.states)
    assert not any(r.used_network for r in recs)
    assert fallback_rate(recs) == 1.0


def test_hybrid_with_exact_oracle_beats_heun(growth):
    h = 0.1
    pair = tableau_heun_rk3_embedded()
    oracle = FlowOracle(growth, tableau_heun(), h)
    ds = build_dataset(growth, tableau_heun(), [[]], [1.0], h, 2.0, 1e-3)
    cfg = HybridConfig(atol=1e-6, rtol=1e-3)
    cfg.delta_max = calibrate_delta_max(oracle, ds, growth, pair, cfg)
    traj, recs = hybrid_integrate(growth, pair, oracle, np.array([1.0]), NO_P, h, 20, cfg)
    heun = integrate(growth, tableau_heun(), np.array([1.0]), NO_P, h, 20)
    assert all(r.used_network for r in recs)
    exact = math.exp(2.0)
    assert abs(traj.states[-1, 0] - exact) < 1e-3 * abs(heun.states[-1, 0] - exact)


def test_hybrid_zero_scale_forces_fallback_with_warning():
    pend = make_pendulum()
    cfg = HybridConfig(atol=0.0, rtol=1e-3, delta_max=1e30)
    with pytest.warns(RuntimeWarning, match="zero scaling"):
        rec = hybrid_step(pend, tableau_heun_rk3_embedded(), ConstantNet([1.0, 1.0]), np.zeros(2), np.array([0.1]), 0.1, cfg)
    assert not rec.used_network and rec.warning is not None
    assert np.array_equal(rec.next, np.zeros(2))
    # zero discrepancy at a zero scale is accepted
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        rec = hybrid_step(pend, tableau_heun_rk3_embedded(), ConstantNet([0.0, 0.0]), np.zeros(2), np.array([0.1]), 0.1, cfg)
    assert rec.used_network and rec.normalized_discrepancy == 0.0


def test_hybrid_nonfinite_correction_falls_back(growth):
    cfg = HybridConfig(delta_max=1e30)
    with pytest.warns(RuntimeWarning):
        rec = hybrid_step(growth, tableau_heun_rk3_embedded(), ConstantNet([np.inf]), np.array([1.0]), NO_P, 0.1, cfg)
    assert not rec.used_network
    assert rec.next[0] == rk_step(growth, tableau_heun_rk3_embedded(), np.array([1.0]), NO_P, 0.1).next[0]


def test_hybrid_requires_calibration_and_pair(growth):
    with pytest.raises(ConfigError):
        hybrid_integrate(growth, tableau_heun_rk3_embedded(), ConstantNet([0.0]), np.array([1.0]), NO_P, 0.1, 3, HybridConfig())
    with pytest.raises(ConfigError):
        hybrid_integrate(growth, tableau_heun(), ConstantNet([0.0]), np.array([1.0]), NO_P, 0.1, 3, HybridConfig(delta_max=1.0))


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2**31),
    dmax=st.floats(0.0, 5.0),
    scale=st.floats(1e-8, 1e-2),
)
def test_safeguard_dominance(seed, dmax, scale):
    """Every hybrid step is either an accepted corrected step or exactly the RK3 step."""
    vdp = make_vanderpol()
    pair = tableau_heun_rk3_embedded()
    rng = np.random.default_rng(seed)
    x, p = rng.normal(size=2), rng.uniform(0.5, 2.0, size=1)
    net = ConstantNet(rng.normal(size=2) * scale / 0.1**3)
    cfg = HybridConfig(atol=1e-6, rtol=1e-3, delta_max=dmax)
    rec = hybrid_step(vdp, pair, net, x, p, 0.1, cfg)
    res = rk_step(vdp, pair, x, p, 0.1)
    if rec.used_network:
        assert rec.normalized_discrepancy <= dmax
        assert np.array_equal(rec.next, res.next_embedded + 0.1**3 * net(x, p))
    else:
        assert rec.normalized_discrepancy > dmax
        assert np.array_equal(rec.next, res.next)


def test_hybrid_report(tmp_path, growth):
    cfg = HybridConfig(delta_max=0.5)
    _, recs = hybrid_integrate(growth, tableau_heun_rk3_embedded(), ConstantNet([0.1]), np.array([1.0]), NO_P, 0.1, 4, cfg)
    path = tmp_path / "steps.csv"
    write_hybrid_report(recs, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["k", "used_network", "normalized_discrepancy"]
    assert [r[0] for r in rows[1:]] == ["0", "1", "2", "3"]
    assert float(rows[1][2]) == recs[0].normalized_discrepancy
