"""Normal/half-normal stochastic production frontier by maximum likelihood.

The model is ``y = X beta + v - u`` with ``v ~ N(0, sigma_v^2)`` and
``u ~ |N(0, sigma_u^2)|``. Both variances are log-linear in their own
regressors, ``ln sigma_u^2 = W_u delta`` and ``ln sigma_v^2 = W_v tau``, so
positivity holds by construction and the optimizer runs unconstrained.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import optimize
from scipy.special import erfcx, log_ndtr

from .dataset import DesignMatrices
from .errors import EvaluationError, UnderdeterminedError
from .linear_model import EffectReport, _solve_ls, cluster_sums

log = logging.getLogger(__name__)

LN2 = math.log(2.0)
HALF_LN_2PI = 0.5 * math.log(2 * math.pi)
SQRT_2_OVER_PI = math.sqrt(2 / math.pi)
# third central moment of a standard half-normal, negated: E[(u - Eu)^3] = C3 sigma_u^3
C3 = SQRT_2_OVER_PI * (4 / math.pi - 1)
BOUNDARY_RATIO = 1e-6
BOUNDARY_OFFSET = 60.0


def log_phi_cdf(x):
    """ln Phi(x), stable far into the lower tail (scipy's log_ndtr)."""
    return log_ndtr(x)


def mills_ratio(z):
    """phi(z) / Phi(z) without forming either factor.

    Uses Phi(z) = erfcx(-z/sqrt2) * exp(-z^2/2) / 2, so the Gaussian factors
    cancel analytically and the ratio stays finite for very negative z.
    """
    z = np.asarray(z, dtype=float)
    with np.errstate(over="ignore"):
        return SQRT_2_OVER_PI / erfcx(-z / math.sqrt(2.0))


@dataclass(frozen=True)
class FrontierParams:
    beta: pd.Series
    delta: pd.Series
    tau: pd.Series

    @classmethod
    def from_vector(cls, theta, design: DesignMatrices) -> "FrontierParams":
        theta = np.asarray(theta, dtype=float)
        k, m = design.X.shape[1], design.W_u.shape[1]
        return cls(
            pd.Series(theta[:k], index=list(design.x_names)),
            pd.Series(theta[k:k + m], index=list(design.wu_names)),
            pd.Series(theta[k + m:], index=list(design.wv_names)),
        )

    def vector(self) -> np.ndarray:
        return np.concatenate([self.beta.to_numpy(float), self.delta.to_numpy(float), self.tau.to_numpy(float)])

    def names(self) -> list[str]:
        return ([f"beta:{n}" for n in self.beta.index] + [f"delta:{n}" for n in self.delta.index]
                + [f"tau:{n}" for n in self.tau.index])


def _split(theta, design):
    k, m = design.X.shape[1], design.W_u.shape[1]
    return theta[:k], theta[k:k + m], theta[k + m:]


def _as_theta(params, design) -> np.ndarray:
    theta = params.vector() if isinstance(params, FrontierParams) else np.asarray(params, dtype=float)
    p = design.X.shape[1] + design.W_u.shape[1] + design.W_v.shape[1]
    if theta.shape != (p,):
        raise ValueError(f"parameter vector has length {theta.size}, design needs {p}")
    return theta


def _loglik_terms(theta, design):
    beta, delta, tau = _split(theta, design)
    eps = design.y - design.X @ beta
    hu = design.W_u @ delta
    hv = design.W_v @ tau
    su2, sv2 = np.exp(hu), np.exp(hv)
    s2 = su2 + sv2
    # a = -eps * lambda / sigma with lambda = sigma_u / sigma_v
    a = -eps * np.exp(0.5 * (hu - hv)) / np.sqrt(s2)
    ll = LN2 - HALF_LN_2PI - 0.5 * np.log(s2) - eps**2 / (2 * s2) + log_phi_cdf(a)
    return ll, eps, su2, sv2, s2, a


def sf_loglik_obs(params, design: DesignMatrices) -> np.ndarray:
    """Per-observation log-likelihood contributions."""
    theta = _as_theta(params, design)
    if not np.all(np.isfinite(theta)):
        raise EvaluationError("non-finite parameter vector")
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        ll = _loglik_terms(theta, design)[0]
    bad = np.flatnonzero(~np.isfinite(ll))
    if bad.size:
        row = int(design.row_index[bad[0]])
        raise EvaluationError(f"non-finite log-likelihood contribution at row {row}", row)
    return ll


def sf_loglik(params, design: DesignMatrices) -> float:
    """Sum of the composed-error log densities (pairwise summation)."""
    return float(np.sum(sf_loglik_obs(params, design)))


def sf_scores(theta, design: DesignMatrices) -> np.ndarray:
    """Per-observation gradient of the log-likelihood, n x p."""
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        _, eps, su2, sv2, s2, a = _loglik_terms(np.asarray(theta, float), design)
        m = mills_ratio(a)
        lam_over_s = np.sqrt(su2 / sv2) / np.sqrt(s2)
        d_eps = -eps / s2 - m * lam_over_s
        r = eps**2 / s2 - 1.0
        d_hu = su2 / (2 * s2) * r + m * a * sv2 / (2 * s2)
        d_hv = sv2 / (2 * s2) * r - m * a * 0.5 * (1 + sv2 / s2)
    return np.hstack([-design.X * d_eps[:, None], design.W_u * d_hu[:, None], design.W_v * d_hv[:, None]])


def sf_gradient(theta, design: DesignMatrices) -> np.ndarray:
    return sf_scores(theta, design).sum(axis=0)


def numerical_hessian(grad, theta, rel_step: float = 1e-5) -> np.ndarray:
    """Central differences of an analytic gradient, symmetrized."""
    theta = np.asarray(theta, dtype=float)
    p = theta.size
    H = np.empty((p, p))
    for j in range(p):
        h = rel_step * max(1.0, abs(theta[j]))
        tp, tm = theta.copy(), theta.copy()
        tp[j] += h
        tm[j] -= h
        H[:, j] = (grad(tp) - grad(tm)) / (2 * h)
    return 0.5 * (H + H.T)


@dataclass(frozen=True)
class FrontierFit:
    params: FrontierParams
    loglik: float
    cov: np.ndarray | None
    converged: bool
    boundary_flag: bool
    n_iterations: int
    composed_residuals: np.ndarray
    start_loglik: float
    hessian_ok: bool
    se_mode: str = "hessian"
    n: int = 0
    n_clusters: int = 0
    treatment: str | None = None
    log_outcome: bool = False
    message: str = ""
    warnings: tuple[str, ...] = field(default_factory=tuple)

    @property
    def names(self) -> list[str]:
        return self.params.names()

    @property
    def df(self) -> int | None:
        return self.n_clusters - 1 if self.se_mode == "cluster" else None

    def index(self, name: str) -> int:
        return self.names.index(name)

    def std_errors(self) -> pd.Series:
        if self.cov is None:
            return pd.Series(np.nan, index=self.names)
        return pd.Series(np.sqrt(np.clip(np.diag(self.cov), 0, None)), index=self.names)

    def effect(self, name: str, percent: bool | None = None) -> EffectReport:
        """Report a single parameter, e.g. ``effect("beta:Z")``."""
        j = self.index(name)
        se = math.nan if self.cov is None else math.sqrt(max(self.cov[j, j], 0.0))
        pct = self.log_outcome if percent is None else percent
        return EffectReport.from_estimate(name, self.params.vector()[j], se, self.df, pct)

    def table(self) -> pd.DataFrame:
        theta = self.params.vector()
        se = self.std_errors().to_numpy()
        with np.errstate(divide="ignore", invalid="ignore"):
            z = theta / se
        return pd.DataFrame({"coef": theta, "std_error": se, "z_stat": z}, index=self.names)


def moment_start(design: DesignMatrices) -> tuple[np.ndarray, dict]:
    """OLS slopes plus a method-of-moments split of the residual variance.

    The residual third moment identifies sigma_u (m3 = -C3 sigma_u^3); the
    remainder of the variance goes to the noise. Positive skew gives a small
    interior starting value for sigma_u instead.
    """
    X, y = design.X, design.y
    b, _ = _solve_ls(X, y)
    e = y - X @ b
    d = e - e.mean()
    m2, m3 = float(np.mean(d**2)), float(np.mean(d**3))
    var_u_factor = 1 - 2 / math.pi
    if m3 < 0:
        su2 = (-m3 / C3) ** (2 / 3)
        su2 = min(su2, 0.9 * m2 / var_u_factor)
    else:
        su2 = 0.1 * m2
    sv2 = m2 - var_u_factor * su2
    theta_b = b.copy()
    const = [j for j in range(X.shape[1]) if np.all(X[:, j] == 1.0)]
    if const:
        theta_b[const[0]] += SQRT_2_OVER_PI * math.sqrt(su2)
    delta = np.zeros(design.W_u.shape[1])
    tau = np.zeros(design.W_v.shape[1])
    delta[_const_col(design.W_u)] = math.log(su2)
    tau[_const_col(design.W_v)] = math.log(sv2)
    info = {"ols_coef": b, "m2": m2, "m3": m3}
    return np.concatenate([theta_b, delta, tau]), info


def _const_col(W) -> int:
    for j in range(W.shape[1]):
        if np.all(W[:, j] == 1.0):
            return j
    raise UnderdeterminedError("variance regressors need an intercept column")


def boundary_candidate(design: DesignMatrices, ols_coef: np.ndarray, m2: float) -> np.ndarray:
    """The sigma_u -> 0 corner: OLS slopes, Gaussian ML noise variance."""
    delta = np.zeros(design.W_u.shape[1])
    tau = np.zeros(design.W_v.shape[1])
    delta[_const_col(design.W_u)] = math.log(m2) - BOUNDARY_OFFSET
    tau[_const_col(design.W_v)] = math.log(m2)
    return np.concatenate([ols_coef, delta, tau])


def _safe_loglik(theta, design) -> float:
    with np.errstate(all="ignore"):
        v = float(np.sum(_loglik_terms(theta, design)[0]))
    return v if np.isfinite(v) else -np.inf


def _newton_polish(theta, design, grad_tol, max_steps=50):
    """Damped Newton ascent from a quasi-Newton solution.

    Returns (theta, loglik, gradient sup-norm, steps, relative change of the
    last accepted step).
    """
    ll = _safe_loglik(theta, design)
    rel = math.inf
    steps = 0
    for steps in range(1, max_steps + 1):
        g = sf_gradient(theta, design)
        gnorm = float(np.max(np.abs(g)))
        if gnorm < grad_tol:
            return theta, ll, gnorm, steps - 1, rel
        H = numerical_hessian(lambda t: sf_gradient(t, design), theta)
        try:
            L = np.linalg.cholesky(-H)
            step = np.linalg.solve(L.T, np.linalg.solve(L, g))
        except np.linalg.LinAlgError:
            step = g / max(1.0, np.max(np.abs(H)))
        t = 1.0
        while t > 1e-8:
            cand = theta + t * step
            ll_c = _safe_loglik(cand, design)
            if ll_c >= ll:
                break
            t *= 0.5
        else:
            return theta, ll, gnorm, steps, 0.0
        rel = abs(ll_c - ll) / max(1.0, abs(ll))
        theta, ll = cand, ll_c
        if rel < 1e-10 and t == 1.0:
            g = sf_gradient(theta, design)
            return theta, ll, float(np.max(np.abs(g))), steps, rel
    g = sf_gradient(theta, design)
    return theta, ll, float(np.max(np.abs(g))), steps, rel


def _covariance(theta, design, se_mode, free):
    """Inverse negative Hessian over the ``free`` parameters (others NaN)."""
    p = theta.size
    idx = np.flatnonzero(free)

    def g_free(tf):
        t = theta.copy()
        t[idx] = tf
        return sf_gradient(t, design)[idx]

    H = numerical_hessian(g_free, theta[idx])
    try:
        L = np.linalg.cholesky(-H)
    except np.linalg.LinAlgError:
        return None
    Linv = np.linalg.inv(L)
    Hinv = Linv.T @ Linv  # (-H)^-1
    if se_mode == "cluster":
        G = design.n_clusters
        S = cluster_sums(sf_scores(theta, design)[:, idx], design.cluster_ids, G)
        Hinv = G / (G - 1) * Hinv @ (S.T @ S) @ Hinv
    cov = np.full((p, p), np.nan)
    cov[np.ix_(idx, idx)] = 0.5 * (Hinv + Hinv.T)
    return cov


def sf_fit(design: DesignMatrices, max_iter: int = 500, grad_tol: float = 1e-6, start="ols_moments",
           se_mode: str = "hessian") -> FrontierFit:
    """Maximize the frontier log-likelihood.

    BFGS (scipy) on the mean log-likelihood with the analytic gradient, then
    damped Newton steps until the gradient sup-norm drops below ``grad_tol``
    or the relative log-likelihood change falls under 1e-10. The sigma_u -> 0
    corner is always evaluated as well and wins when it is at least as good,
    which is how wrong-skew samples end at the boundary.

    ``start`` is ``"ols_moments"`` or a :class:`FrontierParams` /
    parameter vector. ``se_mode`` is ``"hessian"`` (inverse negative Hessian)
    or ``"cluster"`` (cluster-robust sandwich around the same Hessian).
    """
    if se_mode not in ("hessian", "cluster"):
        raise ValueError("se_mode must be 'hessian' or 'cluster'")
    n = design.n
    p = design.X.shape[1] + design.W_u.shape[1] + design.W_v.shape[1]
    if n <= p:
        raise UnderdeterminedError(f"n={n} observations for {p} parameters")

    theta_mm, info = moment_start(design)
    theta0 = theta_mm if isinstance(start, str) and start == "ols_moments" else _as_theta(start, design)
    ll0 = _safe_loglik(theta0, design)
    if not np.isfinite(ll0):
        raise EvaluationError("log-likelihood is not finite at the starting values")

    res = optimize.minimize(
        lambda t: -_safe_loglik(t, design) / n,
        theta0,
        jac=lambda t: -sf_gradient(t, design) / n,
        method="BFGS",
        options={"maxiter": max_iter, "gtol": grad_tol / n},
    )
    theta, ll, gnorm, polish, rel = _newton_polish(res.x, design, grad_tol)
    n_iter = int(res.nit) + polish
    converged = gnorm < grad_tol or rel < 1e-10

    corner = boundary_candidate(design, info["ols_coef"], info["m2"])
    ll_c = _safe_loglik(corner, design)
    if ll_c >= ll:
        theta, ll = corner, ll_c
        gnorm = float(np.max(np.abs(sf_gradient(theta, design))))
        converged = gnorm < grad_tol
    if ll < ll0:
        theta, ll = theta0, ll0
        converged = False

    params = FrontierParams.from_vector(theta, design)
    beta, delta, tau = _split(theta, design)
    su2 = np.exp(design.W_u @ delta)
    sv2 = np.exp(design.W_v @ tau)
    boundary = float(np.mean(su2 / sv2)) < BOUNDARY_RATIO

    warnings = []
    free = np.ones(p, dtype=bool)
    if boundary:
        free[design.X.shape[1]:design.X.shape[1] + design.W_u.shape[1]] = False
        warnings.append("boundary: sigma_u is effectively zero (residual skew has the wrong sign)")
    cov = _covariance(theta, design, se_mode, free)
    if cov is None:
        warnings.append("Hessian is not negative definite; covariance omitted")
    if not converged:
        warnings.append(f"not converged after {n_iter} iterations (gradient sup-norm {gnorm:.3g})")
    for w in warnings:
        log.warning(w)
    return FrontierFit(
        params=params, loglik=ll, cov=cov, converged=bool(converged), boundary_flag=bool(boundary),
        n_iterations=n_iter, composed_residuals=design.y - design.X @ beta, start_loglik=ll0,
        hessian_ok=cov is not None, se_mode=se_mode, n=n, n_clusters=design.n_clusters,
        treatment=design.treatment, log_outcome=design.log_outcome,
        message=str(res.message), warnings=tuple(warnings),
    )


@dataclass(frozen=True)
class InefficiencyIndex:
    u_hat: np.ndarray
    te: np.ndarray
    mean_u: float


def jlms_conditional_mean(eps, su2, sv2) -> np.ndarray:
    """E[u | eps] for the normal/half-normal composed error ``eps = v - u``."""
    eps, su2, sv2 = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (eps, su2, sv2)))
    s2 = su2 + sv2
    mu = -eps * su2 / s2
    sstar = np.sqrt(su2 * sv2 / s2)
    out = np.zeros(eps.shape)
    ok = sstar > 0
    z = mu[ok] / sstar[ok]
    out[ok] = sstar[ok] * (z + mills_ratio(z))
    return np.maximum(out, 0.0)


def jlms_index(fit: FrontierFit, design: DesignMatrices) -> InefficiencyIndex:
    beta, delta, tau = _split(fit.params.vector(), design)
    eps = design.y - design.X @ beta
    u = jlms_conditional_mean(eps, np.exp(design.W_u @ delta), np.exp(design.W_v @ tau))
    return InefficiencyIndex(u_hat=u, te=np.exp(-u), mean_u=float(np.mean(u)))


def sigma_u(params: FrontierParams, w_u) -> np.ndarray:
    """sigma_u at rows of inefficiency regressors (exp of half the index)."""
    return np.exp(0.5 * (np.asarray(w_u, float) @ params.delta.to_numpy(float)))
