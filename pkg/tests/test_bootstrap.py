import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from zigpanel.basis import make_basis
from zigpanel.bootstrap import (BandResult, BootstrapInstabilityError, nearest_rank_quantile,
                                pointwise_halfwidth, simulate, simultaneous_band, synthetic_truth)
from zigpanel.fit import FitOptions, fit
from zigpanel.model import ModelSpec, ParameterSet

from conftest import make_panel


def const_phi(n_df, alpha, gamma, log_k):
    return ParameterSet([alpha], [gamma], np.zeros(n_df), np.zeros(n_df), [], [], log_k)


def test_quantile_convention():
    assert nearest_rank_quantile(np.arange(1, 101), 0.95) == 95
    assert nearest_rank_quantile(np.arange(1, 101), 0.99) == 99
    assert nearest_rank_quantile(np.arange(1, 101), 1.0) == 100
    assert nearest_rank_quantile([3.0], 0.5) == 3.0
    with pytest.raises(ValueError):
        nearest_rank_quantile([], 0.5)


@settings(max_examples=50, deadline=None)
@given(v=st.lists(st.floats(0, 1e6), min_size=1, max_size=300),
       a=st.floats(0.001, 0.5), b=st.floats(0.001, 0.5))
def test_quantile_monotone_in_alpha(v, a, b):
    lo, hi = sorted((a, b))
    assert nearest_rank_quantile(v, 1 - lo) >= nearest_rank_quantile(v, 1 - hi)
    q = nearest_rank_quantile(v, 1 - lo)
    assert q in v
    assert np.mean(np.asarray(v) <= q) >= 1 - lo - 1e-12


def test_all_zero_when_pi_one():
    spec = ModelSpec("A", "eth_sale", make_basis(30, 3))
    y = simulate(spec, const_phi(3, 0.0, 60.0, 0.0), (20, 30, None), seed=1)
    assert not y.any()


def test_exponential_mean():
    spec = ModelSpec("A", "eth_sale", make_basis(1000, 3))
    y = simulate(spec, const_phi(3, math.log(2.0), -800.0, 0.0), (100, 1000, None), seed=2)
    assert (y > 0).all()
    n = y.size
    assert abs(y.mean() - 2.0) < 3 * 2.0 / math.sqrt(n)


def test_sparsity_scale():
    # a zero probability of 0.928 leaves about 7.2% nonzero cells
    gamma = math.log(0.928 / 0.072)
    spec = ModelSpec("A", "eth_sale", make_basis(1000, 3))
    y = simulate(spec, const_phi(3, 1.0, gamma, 0.5), (100, 1000, None), seed=3)
    frac = float((y > 0).mean())
    sd = math.sqrt(0.072 * 0.928 / y.size)
    assert abs(frac - 0.072) < 3 * sd


def test_simulation_rows_are_order_free():
    truth = synthetic_truth(m=12, n=40, df=4, seed=5)
    y = simulate(truth.spec, truth.phi, truth.shape, seed=9)
    again = simulate(truth.spec, truth.phi, truth.shape, seed=9)
    np.testing.assert_array_equal(y, again)
    other = simulate(truth.spec, truth.phi, truth.shape, seed=10)
    assert not np.array_equal(y, other)


def test_synthetic_truth_zero_rate():
    truth = synthetic_truth(m=50, n=200, df=6, zero_rate=0.9, seed=0)
    assert truth.zero_rate() == pytest.approx(0.9, abs=1e-9)
    assert truth.phi.alpha.size == 50


def test_intercept_count_checked():
    truth = synthetic_truth(m=5, n=30, df=3, variant="Full")
    with pytest.raises(ValueError, match="intercepts"):
        simulate(truth.spec, truth.phi, (6, 30, truth.X), seed=0)


@pytest.fixture(scope="module")
def small_fit():
    truth = synthetic_truth(m=10, n=50, df=4, variant="B", zero_rate=0.7, seed=4)
    y = simulate(truth.spec, truth.phi, truth.shape, seed=44)
    panel = make_panel(y, X=truth.X)
    return truth, panel, fit(truth.spec, panel)


def test_band_workers_and_reruns_identical(small_fit):
    truth, panel, res = small_fit
    b1 = simultaneous_band(truth.spec, res, panel, B=100, seed=7, workers=1)
    b2 = simultaneous_band(truth.spec, res, panel, B=100, seed=7, workers=2)
    b3 = simultaneous_band(truth.spec, res, panel, B=100, seed=7, workers=1)
    d1, d2, d3 = (json.dumps(b.to_dict()) for b in (b1, b2, b3))
    assert d1 == d2 == d3
    assert b1.c_alpha >= 0
    assert b1.deviations.size == 100
    assert b1.c_alpha == nearest_rank_quantile(b1.deviations, 0.95)
    for t, f, lo, hi in b1.rows():
        assert lo <= f <= hi
    back = BandResult.from_dict(json.loads(d1))
    assert json.dumps(back.to_dict()) == d1


def test_band_alpha_monotone(small_fit):
    truth, panel, res = small_fit
    b05 = simultaneous_band(truth.spec, res, panel, B=100, alpha=0.05, seed=1)
    b01 = simultaneous_band(truth.spec, res, panel, B=100, alpha=0.01, seed=1)
    assert b01.c_alpha >= b05.c_alpha


@pytest.mark.parametrize("which", ["f", "g"])
def test_gaussian_sup_dominates_pointwise(small_fit, which):
    # sup-norm quantile of the fitted-curve Gaussian process vs its pointwise quantile
    truth, panel, res = small_fit
    pw = pointwise_halfwidth(res, panel.n_days, which, 0.95)
    prefix = "mean:spline" if which == "f" else "zero:spline"
    idx = [j for j, name in enumerate(res.shared_names) if name.startswith(prefix)]
    Bm = res.spec.basis.evaluate(np.arange(1.0, panel.n_days + 1))
    z = np.random.default_rng(0).multivariate_normal(np.zeros(len(idx)), res.cov[np.ix_(idx, idx)], 4000)
    dev = np.abs(z @ Bm.T)
    c = nearest_rank_quantile(np.max(dev, axis=1), 0.95)
    per_t = np.array([nearest_rank_quantile(dev[:, t], 0.95) for t in range(dev.shape[1])])
    assert np.all(per_t <= c)
    # the normal-theory half-width is the same pointwise quantile up to Monte Carlo error
    np.testing.assert_allclose(per_t[1:], pw[1:], rtol=0.06)


@pytest.fixture(scope="module")
def larger_fit():
    truth = synthetic_truth(m=30, n=80, df=4, variant="B", zero_rate=0.5, seed=4)
    y = simulate(truth.spec, truth.phi, truth.shape, seed=44)
    panel = make_panel(y, X=truth.X)
    return truth, panel, fit(truth.spec, panel)


@pytest.mark.parametrize("which", ["f", "g"])
def test_bootstrap_band_dominates_pointwise(larger_fit, which):
    truth, panel, res = larger_fit
    band = simultaneous_band(truth.spec, res, panel, which=which, B=400, seed=1)
    assert np.all(pointwise_halfwidth(res, panel.n_days, which, 0.95) <= band.c_alpha)


def test_freeze_intercepts_flag():
    truth = synthetic_truth(m=6, n=40, df=3, variant="Full", zero_rate=0.5, seed=2)
    panel = make_panel(simulate(truth.spec, truth.phi, truth.shape, seed=3), X=truth.X)
    res = fit(truth.spec, panel)
    band = simultaneous_band(truth.spec, res, panel, B=100, seed=0, freeze_intercepts=True)
    assert band.deviations.size == 100 and band.c_alpha > 0


@pytest.mark.parametrize("kw,match", [({"B": 50}, "at least 100"), ({"alpha": 1.5}, "alpha"),
                                      ({"which": "h"}, "which")])
def test_band_argument_checks(small_fit, kw, match):
    truth, panel, res = small_fit
    with pytest.raises(ValueError, match=match):
        simultaneous_band(truth.spec, res, panel, **kw)


def test_unconverged_fit_rejected(small_fit):
    truth, panel, _ = small_fit
    res = fit(truth.spec, panel, FitOptions(max_iters=1, polish_iters=0, compute_se=False))
    with pytest.raises(ValueError, match="converged"):
        simultaneous_band(truth.spec, res, panel, B=100)


def test_instability_when_refits_fail(small_fit):
    truth, panel, res = small_fit
    hopeless = FitOptions(max_iters=1, polish_iters=0, gtol=1e-30)
    with pytest.raises(BootstrapInstabilityError, match="instability"):
        simultaneous_band(truth.spec, res, panel, B=100, opts=hopeless)
