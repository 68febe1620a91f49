import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from sfdecomp.dataset import DesignMatrices, build_design
from sfdecomp.errors import EvaluationError
from sfdecomp.frontier import (
    FrontierParams,
    jlms_conditional_mean,
    jlms_index,
    log_phi_cdf,
    mills_ratio,
    sf_fit,
    sf_gradient,
    sf_loglik,
    sf_loglik_obs,
    sigma_u,
)
from sfdecomp.linear_model import ols_fit
from sfdecomp.synthetic import DgpConfig, generate, quadrature_oracle


def tiny_design(eps, x=None):
    eps = np.asarray(eps, float)
    n = len(eps)
    X = np.ones((n, 1)) if x is None else np.column_stack([np.ones(n), x])
    names = ("const",) if x is None else ("const", "x")
    return DesignMatrices(y=eps, X=X, x_names=names)


def test_single_cell_value():
    d = tiny_design([0.0])
    ll = sf_loglik(np.array([0.0, 0.0, 0.0]), d)
    # eps=0, su=sv=1: ln 2 + ln phi(0; s^2=2) + ln Phi(0)
    expected = math.log(2) - 0.5 * math.log(2 * math.pi * 2) + math.log(0.5)
    assert ll == pytest.approx(expected, abs=1e-12)
    assert ll == pytest.approx(-1.26551212, abs=1e-8)


def test_gaussian_limit():
    rng = np.random.default_rng(1)
    eps = rng.normal(scale=0.3, size=200)
    d = tiny_design(eps)
    ll = sf_loglik(np.array([0.0, -30.0, 2 * math.log(0.3)]), d)
    gauss = stats.norm.logpdf(eps, scale=0.3).sum()
    assert ll == pytest.approx(gauss, abs=1e-4)


def test_log_phi_and_mills_tails():
    assert np.isfinite(log_phi_cdf(-40.0))
    assert log_phi_cdf(-40.0) == pytest.approx(stats.norm.logcdf(-40.0), rel=1e-10)
    for z in (-30.0, -5.0, 0.0, 3.0):
        assert mills_ratio(z) == pytest.approx(stats.norm.pdf(z) / stats.norm.cdf(z), rel=1e-8)


def test_gradient_matches_central_differences():
    cfg = DgpConfig(n=400, n_clusters=10, seed=4)
    d = build_design(generate(cfg), cfg.formula())
    theta = np.concatenate([ols_fit(d).coef, [-3.0, 0.2], [-3.5]])
    g = sf_gradient(theta, d)
    num = np.zeros_like(theta)
    for j in range(len(theta)):
        h = 1e-6 * max(1.0, abs(theta[j]))
        e = np.zeros_like(theta)
        e[j] = h
        num[j] = (sf_loglik(theta + e, d) - sf_loglik(theta - e, d)) / (2 * h)
    np.testing.assert_allclose(g, num, rtol=1e-5, atol=1e-3)


def test_row_reordering_invariance(small_table, small_cfg):
    d = build_design(small_table, small_cfg.formula())
    theta = np.concatenate([ols_fit(d).coef, [-3.0, 0.1], [-3.5]])
    perm = np.random.default_rng(2).permutation(d.n)
    shuffled = replace(d, y=d.y[perm], X=d.X[perm], W_u=d.W_u[perm], W_v=d.W_v[perm],
                       cluster_ids=d.cluster_ids[perm], row_index=d.row_index[perm])
    assert sf_loglik(theta, shuffled) == pytest.approx(sf_loglik(theta, d), rel=1e-12)


def test_evaluation_error_names_row():
    d = tiny_design([0.0, 1.0, 2.0])
    with pytest.raises(EvaluationError):
        sf_loglik(np.array([0.0, 800.0, 0.0]), d)


def test_jlms_values():
    assert jlms_conditional_mean(0.0, 1.0, 1.0) == pytest.approx(1 / math.sqrt(math.pi), abs=1e-10)
    assert jlms_conditional_mean(0.0, 1.0, 1.0) == pytest.approx(0.56419, abs=1e-5)
    assert jlms_conditional_mean(5.0, 0.0, 1.0) == 0.0
    tiny = jlms_conditional_mean(np.array([-1.0, 0.0, 1.0]), 1e-20, 1.0)
    assert np.all(tiny < 1e-9) and np.all(tiny >= 0)


@settings(max_examples=60, deadline=None)
@given(st.floats(-3, 3), st.floats(0.05, 3), st.floats(0.05, 3))
def test_closed_form_matches_quadrature(eps, su, sv):
    d = tiny_design([eps])
    ll = sf_loglik(np.array([0.0, 2 * math.log(su), 2 * math.log(sv)]), d)
    assert ll == pytest.approx(quadrature_oracle("loglik_cell", eps, su, sv), abs=1e-7)
    u = jlms_conditional_mean(eps, su**2, sv**2)
    assert float(u) == pytest.approx(quadrature_oracle("jlms", eps, su, sv), abs=1e-7)


@pytest.fixture(scope="module")
def fitted():
    cfg = DgpConfig(n=3000, n_clusters=40, seed=9)
    d = build_design(generate(cfg), cfg.formula())
    return cfg, d, sf_fit(d)


def test_fit_recovers_and_improves(fitted):
    cfg, d, fit = fitted
    assert fit.converged and not fit.boundary_flag and fit.hessian_ok
    assert fit.loglik >= fit.start_loglik
    se = fit.std_errors()
    z = fit.params.beta["Z"]
    assert abs(z - cfg.gamma1_true) < 3 * se["beta:Z"]
    assert abs(fit.params.tau["const"] - 2 * math.log(cfg.sigma_v)) < 3 * se["tau:const"]
    assert fit.effect("beta:Z").percent_scale


def test_jlms_nonnegative_and_mean(fitted):
    cfg, d, fit = fitted
    idx = jlms_index(fit, d)
    assert np.all(idx.u_hat >= 0)
    assert np.all((idx.te > 0) & (idx.te <= 1))
    su = cfg.sigma_u(d.X[:, d.x_names.index("Z")])
    pop = math.sqrt(2 / math.pi) * su.mean()
    mc_se = idx.u_hat.std(ddof=1) / math.sqrt(d.n)
    assert abs(idx.mean_u - pop) < 3 * mc_se + 0.01
    np.testing.assert_allclose(sigma_u(fit.params, d.W_u), np.exp(0.5 * d.W_u @ fit.params.delta.to_numpy()))


def test_intercept_only_u_hat_depends_on_eps_only():
    cfg = DgpConfig(n=1500, n_clusters=30, seed=2)
    d = build_design(generate(cfg), cfg.formula(ineff_determinants=()))
    d = replace(d, W_u=np.ones((d.n, 1)), wu_names=("const",))
    fit = sf_fit(d)
    idx = jlms_index(fit, d)
    order = np.argsort(fit.composed_residuals)
    assert np.all(np.diff(idx.u_hat[order]) <= 1e-12)


def test_cluster_se_mode(fitted):
    _, d, fit = fitted
    cl = sf_fit(d, se_mode="cluster")
    assert cl.df == 39 and fit.df is None
    np.testing.assert_allclose(cl.params.vector(), fit.params.vector(), rtol=1e-6, atol=1e-8)


def test_params_roundtrip(fitted):
    _, d, fit = fitted
    again = FrontierParams.from_vector(fit.params.vector(), d)
    np.testing.assert_array_equal(again.vector(), fit.params.vector())
    assert sf_loglik_obs(fit.params, d).sum() == pytest.approx(fit.loglik, rel=1e-12)
