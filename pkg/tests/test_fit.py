import json
import math

import numpy as np
import pytest

from zigpanel.basis import make_basis
from zigpanel.bootstrap import simulate, synthetic_truth
from zigpanel.fit import (DegenerateStreamError, FitOptions, FitResult, fit, fit_problem,
                          fit_variants, information_criteria, standard_errors)
from zigpanel.model import Layout, ModelSpec, Problem, linear_predictors

from conftest import make_panel


@pytest.mark.parametrize("nll,k,n,aic,bic", [
    (146445.5, 23, 168360, 292937.1, 293167.8),
    (143148.0, 23, 168360, 286342.0, 286572.8),
    (128344.5, 1245, 168360, 259179.0, 271671.1),
])
def test_information_criteria_table_values(nll, k, n, aic, bic):
    a, b = information_criteria(nll, k, n)
    assert abs(a - aic) <= 0.1 and abs(b - bic) <= 0.1


def test_information_criteria_empty_model():
    assert information_criteria(0.0, 0, 10) == (0.0, 0.0)
    with pytest.raises(ValueError):
        information_criteria(1.0, 1, 0)


def test_information_criteria_model_b():
    assert information_criteria(146403.1, 27, 168360)[0] == pytest.approx(292860.2, abs=0.1)


def synthetic_panel(variant="Full", m=20, n=60, df=4, seed=3, zero_rate=0.6):
    truth = synthetic_truth(m=m, n=n, df=df, variant=variant, zero_rate=zero_rate, seed=seed)
    y = simulate(truth.spec, truth.phi, truth.shape, seed=seed + 100)
    return truth, make_panel(y, X=truth.X if truth.X.size else np.zeros((n, 2)))


@pytest.fixture(scope="module")
def variants():
    truth, panel = synthetic_panel()
    return panel, fit_variants(panel, "eth_sale", truth.spec.basis)


def test_nesting_and_monotone_improvement(variants):
    _, fits = variants
    a, b, full = fits["A"], fits["B"], fits["Full"]
    assert full.nll <= b.nll + 1e-6 and b.nll <= a.nll + 1e-6
    for r in fits.values():
        assert r.converged and r.grad_norm <= 1e-6
        assert r.nll <= r.nll_init
        aic, bic = information_criteria(r.nll, r.n_params, r.n_obs)
        assert abs(r.aic - aic) < 1e-9 and abs(r.bic - bic) < 1e-9
        assert r.residual_df == r.n_obs - r.n_params


def test_stationarity_of_unpenalized_loglik(variants):
    panel, fits = variants
    r = fits["B"]
    prob = Problem(r.spec, panel.streams["eth_sale"], panel.covariates)
    g = prob.loglik_and_grad(r.phi_hat.to_vector())[1]
    assert np.max(np.abs(g)) < 1e-5


def test_determinism():
    truth, panel = synthetic_panel(variant="B", m=8, n=50)
    r1 = fit(ModelSpec("B", "eth_sale", truth.spec.basis), panel)
    r2 = fit(ModelSpec("B", "eth_sale", truth.spec.basis), panel)
    assert json.dumps(r1.to_dict(), sort_keys=True) == json.dumps(r2.to_dict(), sort_keys=True)


def test_result_roundtrip(variants):
    _, fits = variants
    r = fits["Full"]
    back = FitResult.from_dict(json.loads(json.dumps(r.to_dict())))
    np.testing.assert_array_equal(back.phi_hat.to_vector(), r.phi_hat.to_vector())
    assert back.nll == r.nll and back.se == r.se and back.spec == r.spec


def test_coefficient_rows_z_values(variants):
    _, fits = variants
    for comp, term, est, se, z, p in fits["B"].coefficient_rows():
        assert z == est / se
        assert p == pytest.approx(math.erfc(abs(z) / math.sqrt(2.0)), rel=1e-12)
    # z-value convention: estimate over its standard error
    assert -1.075 / 0.051 == pytest.approx(-21.03, abs=0.06)


def test_intercept_only_gamma_mle():
    rng = np.random.default_rng(4)
    y = rng.gamma(2.5, 40.0, size=(10, 100))
    spec = ModelSpec("A", "eth_sale", make_basis(100, 3))
    prob = Problem(spec, y)
    L = prob.layout
    init = np.zeros(L.size)
    init[L.slices["gamma"]] = -40.0
    fixed = np.r_[L.slices["gamma"], L.slices["beta"], L.slices["delta"]]
    theta, *_ = fit_problem(prob, FitOptions(), init, fixed)
    assert abs(theta[0] - math.log(y.mean())) < 1e-8


def test_scale_robustness():
    truth, panel = synthetic_panel(variant="B", m=10, n=60, seed=9)
    spec = ModelSpec("B", "eth_sale", truth.spec.basis)
    opts = FitOptions(compute_se=False)
    r1 = fit(spec, panel, opts)
    c = 250.0
    r2 = fit(spec, panel.with_stream("eth_sale", c * panel.streams["eth_sale"]), opts)
    assert abs(r2.phi_hat.alpha[0] - r1.phi_hat.alpha[0] - math.log(c)) < 1e-4
    assert abs(r2.phi_hat.log_k - r1.phi_hat.log_k) < 1e-4
    np.testing.assert_allclose(r2.phi_hat.zeta, r1.phi_hat.zeta, atol=1e-4)
    _, pi1 = linear_predictors(spec, r1.phi_hat, panel)
    _, pi2 = linear_predictors(spec, r2.phi_hat, panel)
    assert np.max(np.abs(pi1 - pi2)) < 1e-4


def test_degenerate_stream():
    spec = ModelSpec("A", "eth_sale", make_basis(20, 3))
    with pytest.raises(DegenerateStreamError, match="degenerate stream"):
        fit(spec, make_panel(np.zeros((3, 20))))


def test_nonconvergence_is_reported_not_raised():
    truth, panel = synthetic_panel(variant="B", m=6, n=40)
    r = fit(ModelSpec("B", "eth_sale", truth.spec.basis), panel,
            FitOptions(max_iters=1, polish_iters=0, compute_se=False))
    assert not r.converged and r.grad_norm > 1e-6


class Quadratic:
    """Negative log-likelihood ``0.5 * sum(h * theta**2)`` with a layout-like interface."""

    def __init__(self, h):
        self.h = np.asarray(h, dtype=float)

        class _L:
            def shared_index(_):
                return np.arange(len(h))

            def wallet_index(_):
                return np.array([], dtype=int)
        self.layout = _L()

    def objective(self, theta):
        return 0.5 * float(self.h @ theta ** 2), self.h * theta


def test_quadratic_toy_standard_errors():
    h = np.array([4.0, 0.25, 100.0])
    se, cov, cond = standard_errors(Quadratic(h), np.array([0.3, -1.0, 2.0]))
    np.testing.assert_allclose(se, 1.0 / np.sqrt(h), atol=1e-6)
    assert cond == pytest.approx(400.0)


def test_singular_information_gives_missing_se():
    se, cov, cond = standard_errors(Quadratic([1.0, 0.0]), np.zeros(2))
    assert se is None and cov is None and math.isinf(cond)


def test_profiled_se_matches_full_inverse():
    truth, panel = synthetic_panel(variant="Full", m=6, n=50)
    spec = truth.spec
    r = fit(spec, panel)
    prob = Problem(spec, panel.streams["eth_sale"], panel.covariates, ridge=1e-4)
    from zigpanel.fit import fd_information
    info = fd_information(prob, r.phi_hat.to_vector())
    full_cov = np.linalg.inv(info)
    s = prob.layout.shared_index()
    np.testing.assert_allclose(np.sqrt(np.diag(full_cov))[s], np.sqrt(np.diag(r.cov)), rtol=1e-8)
