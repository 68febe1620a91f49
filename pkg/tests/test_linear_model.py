import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfdecomp.dataset import DesignMatrices, FormulaSpec, build_design
from sfdecomp.errors import (
    ClusterError,
    DegenerateError,
    DomainError,
    ProfileError,
    SingularityError,
    UnderdeterminedError,
)
from sfdecomp.linear_model import (
    EffectReport,
    heterogeneous_ols,
    itt_effect,
    marginal_effect,
    ols_fit,
    p_value,
    wald_joint_test,
)
from sfdecomp.synthetic import DgpConfig, generate


def design_from(y, cols, names, clusters=None, treatment=None):
    X = np.column_stack([np.ones(len(y))] + list(cols))
    return DesignMatrices(y=np.asarray(y, float), X=X, x_names=("const", *names), cluster_ids=clusters,
                          treatment=treatment)


def clustered_draw(rng, n=2000, G=40, icc_sd=0.5):
    g = rng.integers(0, G, n)
    x = rng.normal(size=n) + 0.5 * rng.normal(size=G)[g]
    y = 2 + 0.5 * x + icc_sd * rng.normal(size=G)[g] + rng.normal(size=n)
    return y, x, g


def test_perfect_fit():
    fit = ols_fit(design_from([1, 2, 3], [[1, 2, 3]], ["x"]), "classical")
    np.testing.assert_allclose(fit.coef, [0.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(fit.residuals, 0.0, atol=1e-12)


def test_singleton_clusters_match_hc1(rng):
    n = 200
    x = rng.normal(size=n)
    y = 1 + x + rng.normal(size=n) * (1 + np.abs(x))
    d = design_from(y, [x], ["x"])
    fit = ols_fit(d, "cluster_cr1")
    X = d.X
    xtxi = np.linalg.inv(X.T @ X)
    e = fit.residuals
    hc0 = xtxi @ (X.T * e**2) @ X @ xtxi
    c = n / (n - 1) * (n - 1) / (n - 2)
    np.testing.assert_allclose(fit.cov, c * hc0, rtol=1e-10)


def test_errors():
    with pytest.raises(UnderdeterminedError):
        ols_fit(design_from([1, 2], [[1, 3]], ["x"]), "classical")
    with pytest.raises(ClusterError):
        ols_fit(design_from([1, 2, 3, 5], [[1, 3, 2, 2]], ["x"], clusters=[0, 0, 0, 0]))


def test_location_and_scale_invariance(rng):
    y, x, g = clustered_draw(rng, n=500, G=25)
    base = ols_fit(design_from(y, [x], ["x"], g))
    shifted = ols_fit(design_from(y + 7.5, [x], ["x"], g))
    assert shifted.coef[0] - base.coef[0] == pytest.approx(7.5, abs=1e-8)
    assert shifted.coef[1] == pytest.approx(base.coef[1], abs=1e-8)
    np.testing.assert_allclose(shifted.std_errors, base.std_errors, atol=1e-8)
    scaled = ols_fit(design_from(y, [3 * x], ["x"], g))
    assert scaled.coef[1] == pytest.approx(base.coef[1] / 3, rel=1e-10)
    assert scaled.std_errors.iloc[1] == pytest.approx(base.std_errors.iloc[1] / 3, rel=1e-10)
    assert scaled.effect("x").t_stat == pytest.approx(base.effect("x").t_stat, rel=1e-10)


def test_classical_and_cr1_agree_on_iid(rng):
    n = 20000
    x = rng.normal(size=n)
    y = 1 + 0.3 * x + rng.normal(size=n)
    d = design_from(y, [x], ["x"])
    a = ols_fit(d, "classical").std_errors
    b = ols_fit(d, "cluster_cr1").std_errors
    assert np.max(np.abs(b / a - 1)) < 0.10


def test_clustered_recovery_single_draw(rng):
    y, x, g = clustered_draw(rng)
    fit = ols_fit(design_from(y, [x], ["x"], g))
    assert fit.df == 39
    for j, truth in enumerate((2.0, 0.5)):
        assert abs(fit.coef[j] - truth) < 3 * fit.std_errors.iloc[j]


def test_clustered_coverage(rng):
    hits = []
    for _ in range(200):
        y, x, g = clustered_draw(rng, n=800)
        e = ols_fit(design_from(y, [x], ["x"], g)).effect("x")
        lo, hi = e.ci()
        hits.append(lo <= 0.5 <= hi)
    assert 0.90 <= np.mean(hits) <= 0.98


def test_pvalue_consistency():
    r = EffectReport.from_estimate("Z", 0.1354, 0.0307, df=39, percent=True)
    assert str(r) == "13.54*** (3.07)"
    assert r.p_value == pytest.approx(p_value(r.t_stat, 39))
    assert r.exp_percent == pytest.approx(100 * (math.exp(0.1354) - 1))
    assert p_value(0.0, 10) == 1.0


def test_itt_no_effect_and_degenerate(small_table):
    frame = small_table.frame.copy()
    frame["flat"] = 3.0 + 0.0 * frame["land"]
    t = small_table.with_frame(frame)
    spec = FormulaSpec(outcome="rice", treatment="Z", cluster="branch")
    e = itt_effect(t, "flat", spec)
    assert e.estimate == pytest.approx(0.0, abs=1e-12)
    frame["Zc"] = 1.0
    with pytest.raises(DegenerateError):
        itt_effect(small_table.with_frame(frame), "rice", FormulaSpec(outcome="rice", treatment="Zc", cluster="branch"))


def test_itt_recovers_log_effect():
    cfg = DgpConfig(n=3000, n_clusters=40, gamma1_true=0.135, delta_true={"const": -math.inf}, seed=5)
    t = generate(cfg)
    spec = FormulaSpec(outcome="rice", treatment="Z", cluster="branch")
    fit = ols_fit(build_design(t, cfg.formula()))
    e = fit.effect("Z", percent=False)
    assert abs(e.estimate - 0.135) < 3 * e.std_error
    assert itt_effect(t, "rice", spec, log_outcome=True).df == 39


def test_wald_errors_and_values(rng):
    y, x, g = clustered_draw(rng, n=400, G=20)
    z = rng.normal(size=len(y))
    fit = ols_fit(design_from(y, [x, z], ["x", "z"], g))
    with pytest.raises(DomainError):
        wald_joint_test(fit, [])
    w = wald_joint_test(fit, ["x"])
    assert w.F == pytest.approx(fit.effect("x").t_stat ** 2, rel=1e-10)
    assert w.p_value == pytest.approx(fit.effect("x").p_value, rel=1e-8)
    h = wald_joint_test(fit, ["x", "z"], adjustment="hotelling")
    assert h.df2 == 18 and h.F == pytest.approx(h.statistic * 18 / (2 * 19))
    bad = fit.__class__(**{**fit.__dict__, "cov": np.zeros_like(fit.cov)})
    with pytest.raises(SingularityError):
        wald_joint_test(bad, ["x"])


def test_wald_power_single_draw(rng):
    n, G = 3000, 40
    g = rng.integers(0, G, n)
    zc = (rng.random(G) < 0.5).astype(float)
    z = zc[g]
    strong = z + 0.3 * rng.normal(size=n)
    noise = rng.normal(size=n)
    fit = ols_fit(design_from(z, [strong, noise], ["strong", "noise"], g))
    assert wald_joint_test(fit, ["strong", "noise"]).p_value < 0.01


def _hetero_design(rng, n=3000, G=40, gamma=0.13, delta=0.04):
    g = rng.integers(0, G, n)
    z = (rng.random(G) < 0.5).astype(float)[g]
    tenant = (rng.random(n) < 0.3).astype(float)
    y = 1 + gamma * z + 0.2 * tenant + delta * z * tenant + 0.1 * rng.normal(size=n)
    X = np.column_stack([np.ones(n), z, tenant, z * tenant])
    return DesignMatrices(y=y, X=X, x_names=("const", "Z", "tenant", "Z:tenant"), cluster_ids=g, treatment="Z")


def test_marginal_effect_profiles(rng):
    d = _hetero_design(rng)
    fit, me0 = heterogeneous_ols(d, {"tenant": 0.0})
    assert me0.estimate == fit.coef[fit.index("Z")]
    for share in (0.0, 0.32, 1.0):
        me = marginal_effect(fit, {"Z:tenant": share})
        assert abs(me.estimate - (0.13 + 0.04 * share)) < 3 * me.std_error
    with pytest.raises(ProfileError):
        marginal_effect(fit, {"landless": 1.0})


def test_marginal_effect_anchor():
    # pinned coefficients: treatment 13.06, tenant interaction 3.45 (percent scale)
    fit = ols_fit(_hetero_design(np.random.default_rng(0)))
    coef = fit.coef.copy()
    coef[fit.index("Z")] = 0.1306
    coef[fit.index("Z:tenant")] = 0.0345
    pinned = fit.__class__(**{**fit.__dict__, "coef": coef, "log_outcome": True})
    me = marginal_effect(pinned, {"tenant": 0.32})
    assert me.estimate == pytest.approx(14.16, abs=0.005)
    assert 13.06 + 3.45 * 0.32 == pytest.approx(14.164)


@settings(max_examples=40, deadline=None)
@given(st.floats(-50, 50), st.floats(0.1, 20))
def test_invariance_property(shift, scale):
    rng = np.random.default_rng(3)
    y, x, g = clustered_draw(rng, n=200, G=10)
    base = ols_fit(design_from(y, [x], ["x"], g))
    other = ols_fit(design_from(y + shift, [scale * x], ["x"], g))
    assert other.coef[1] * scale == pytest.approx(base.coef[1], rel=1e-8)
    assert other.effect("x").t_stat == pytest.approx(base.effect("x").t_stat, rel=1e-7)
