"""OLS with cluster-robust (CR1) covariance, ITT effects and Wald tests."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np
import pandas as pd
from scipy import linalg, stats

from .dataset import DesignMatrices, FormulaSpec, ObservationTable, build_design
from .errors import (
    ClusterError,
    DegenerateError,
    DesignError,
    DomainError,
    ProfileError,
    SingularityError,
    UnderdeterminedError,
)

SE_MODES = ("classical", "cluster_cr1")


def p_value(t: float, df: int | None) -> float:
    """Two-sided p-value; normal reference when ``df`` is None."""
    if not np.isfinite(t):
        return math.nan
    if df is None:
        return float(2 * stats.norm.sf(abs(t)))
    return float(2 * stats.t.sf(abs(t), df))


def critical_value(df: int | None, level: float = 0.95) -> float:
    q = 0.5 + level / 2
    return float(stats.norm.ppf(q) if df is None else stats.t.ppf(q, df))


@dataclass(frozen=True)
class EffectReport:
    """One estimated effect with its inference.

    When ``percent_scale`` is set, ``estimate`` and ``std_error`` are 100x the
    effect on the log outcome and ``exp_percent`` holds 100*(exp(c) - 1).
    """

    name: str
    estimate: float
    std_error: float
    t_stat: float
    p_value: float
    df: int | None
    percent_scale: bool = False
    exp_percent: float | None = None

    @classmethod
    def from_estimate(cls, name, estimate, std_error, df=None, percent=False) -> "EffectReport":
        estimate = float(estimate)
        se = float(std_error) if std_error is not None else math.nan
        t = estimate / se if se > 0 else math.nan
        if percent:
            return cls(name, 100 * estimate, 100 * se, t, p_value(t, df), df, True,
                       100 * math.expm1(estimate))
        return cls(name, estimate, se, t, p_value(t, df), df, False, None)

    def ci(self, level: float = 0.95) -> tuple[float, float]:
        h = critical_value(self.df, level) * self.std_error
        return self.estimate - h, self.estimate + h

    def stars(self) -> str:
        p = self.p_value
        if not np.isfinite(p):
            return ""
        return "***" if p < 0.01 else "**" if p < 0.05 else "*" if p < 0.1 else ""

    def __str__(self):
        return f"{self.estimate:.2f}{self.stars()} ({self.std_error:.2f})"

    def as_dict(self) -> dict:
        lo, hi = self.ci()
        return {
            "name": self.name, "estimate": self.estimate, "std_error": self.std_error,
            "t_stat": self.t_stat, "p_value": self.p_value, "df": self.df,
            "ci_lower": lo, "ci_upper": hi, "percent_scale": self.percent_scale,
            "exp_percent": self.exp_percent,
        }


@dataclass(frozen=True)
class OlsFit:
    names: tuple[str, ...]
    coef: np.ndarray
    cov: np.ndarray
    residuals: np.ndarray
    n: int
    k: int
    n_clusters: int
    r_squared: float
    residual_moments: tuple[float, float]
    se_mode: str
    df: int
    treatment: str | None = None
    log_outcome: bool = False
    extra: Mapping = field(default_factory=dict)

    @property
    def params(self) -> pd.Series:
        return pd.Series(self.coef, index=self.names)

    @property
    def std_errors(self) -> pd.Series:
        return pd.Series(np.sqrt(np.clip(np.diag(self.cov), 0, None)), index=self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DesignError(f"no coefficient named {name!r}") from None

    def effect(self, name: str, percent: bool | None = None) -> EffectReport:
        j = self.index(name)
        pct = self.log_outcome if percent is None else percent
        return EffectReport.from_estimate(name, self.coef[j], math.sqrt(max(self.cov[j, j], 0.0)),
                                          self.df, pct)

    def linear_combination(self, weights: Mapping[str, float]) -> tuple[float, float]:
        a = np.zeros(self.k)
        for name, w in weights.items():
            a[self.index(name)] = w
        return float(a @ self.coef), float(math.sqrt(max(a @ self.cov @ a, 0.0)))

    def table(self) -> pd.DataFrame:
        se = self.std_errors.to_numpy()
        with np.errstate(divide="ignore", invalid="ignore"):
            t = self.coef / se
        p = [p_value(v, self.df) for v in t]
        return pd.DataFrame({"coef": self.coef, "std_error": se, "t_stat": t, "p_value": p},
                            index=list(self.names))


def cluster_sums(M: np.ndarray, cluster_ids: np.ndarray, n_clusters: int) -> np.ndarray:
    """Per-cluster column sums of ``M`` (G x k)."""
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        return np.bincount(cluster_ids, weights=M, minlength=n_clusters)
    return np.column_stack([np.bincount(cluster_ids, weights=M[:, j], minlength=n_clusters)
                            for j in range(M.shape[1])])


def _solve_ls(X: np.ndarray, y: np.ndarray):
    """Least squares by pivoted QR; returns (coef, (X'X)^-1)."""
    n, k = X.shape
    Q, R, piv = linalg.qr(X, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    if d[-1] <= max(n, k) * np.finfo(float).eps * d[0] * 10:
        raise DesignError("design matrix is rank deficient")
    b_p = linalg.solve_triangular(R, Q.T @ y)
    Rinv = linalg.solve_triangular(R, np.eye(k))
    inv_p = Rinv @ Rinv.T
    coef = np.empty(k)
    coef[piv] = b_p
    xtxi = np.empty((k, k))
    xtxi[np.ix_(piv, piv)] = inv_p
    return coef, xtxi


def ols_fit(design: DesignMatrices, se_mode: str = "cluster_cr1") -> OlsFit:
    if se_mode not in SE_MODES:
        raise ValueError(f"se_mode must be one of {SE_MODES}")
    X, y = design.X, design.y
    n, k = X.shape
    if n <= k:
        raise UnderdeterminedError(f"n={n} observations for k={k} coefficients")
    G = design.n_clusters
    if se_mode == "cluster_cr1" and G < 2:
        raise ClusterError(f"cluster-robust covariance needs at least 2 clusters, got {G}")

    coef, xtxi = _solve_ls(X, y)
    e = y - X @ coef
    if se_mode == "classical":
        s2 = float(e @ e) / (n - k)
        cov = s2 * xtxi
        df = n - k
    else:
        S = cluster_sums(X * e[:, None], design.cluster_ids, G)
        c = G / (G - 1) * (n - 1) / (n - k)
        cov = c * xtxi @ (S.T @ S) @ xtxi
        df = G - 1
    cov = 0.5 * (cov + cov.T)

    has_const = np.any(np.all(X == 1.0, axis=0))
    yc = y - y.mean() if has_const else y
    sst = float(yc @ yc)
    r2 = 1.0 - float(e @ e) / sst if sst > 0 else 0.0
    d = e - e.mean()
    m2, m3 = float(np.mean(d**2)), float(np.mean(d**3))
    return OlsFit(
        names=design.x_names, coef=coef, cov=cov, residuals=e, n=n, k=k, n_clusters=G,
        r_squared=r2, residual_moments=(m2, m3), se_mode=se_mode, df=df,
        treatment=design.treatment, log_outcome=design.log_outcome,
    )


def itt_effect(table: ObservationTable, outcome: str, spec: FormulaSpec, with_covariates: bool = False,
               log_outcome: bool = False, se_mode: str = "cluster_cr1") -> EffectReport:
    """Coefficient on the treatment from regressing ``outcome`` on Z (plus covariates)."""
    sub = FormulaSpec(
        outcome=outcome, treatment=spec.treatment, cluster=spec.cluster, inputs=(),
        log_outcome=log_outcome, covariates=spec.covariates if with_covariates else (),
    )
    return itt_fit(table, sub, se_mode).effect(spec.treatment)


def itt_fit(table: ObservationTable, spec: FormulaSpec, se_mode: str = "cluster_cr1") -> OlsFit:
    z = table[spec.treatment].dropna()
    if z.nunique() < 2:
        raise DegenerateError(f"treatment {spec.treatment!r} is constant")
    design = build_design(table, spec)
    if np.ptp(design.X[:, design.x_names.index(spec.treatment)]) == 0:
        raise DegenerateError(f"treatment {spec.treatment!r} is constant in the estimation sample")
    return ols_fit(design, se_mode)


class WaldTest(NamedTuple):
    F: float
    df1: int
    df2: int
    p_value: float
    statistic: float


def wald_joint_test(fit: OlsFit, coefficient_names, adjustment: str = "none") -> WaldTest:
    """Joint test that the named coefficients are all zero.

    The Wald statistic W = b' V^-1 b uses the fit's covariance. With
    ``adjustment="none"`` it is reported as F = W/q on (q, G-1) degrees of
    freedom (q, n-k for classical fits). ``adjustment="hotelling"`` treats W
    as a Hotelling T^2 built from G cluster scores and reports
    F = W (G-q) / (q (G-1)) on (q, G-q); this keeps the size close to nominal
    when q is a sizeable fraction of G.
    """
    names = list(dict.fromkeys(coefficient_names))
    if not names:
        raise DomainError("wald_joint_test needs at least one restriction")
    idx = [fit.index(n) for n in names]
    b = fit.coef[idx]
    V = fit.cov[np.ix_(idx, idx)]
    q = len(idx)
    w, vecs = np.linalg.eigh(V)
    if w.min() <= w.max() * 1e-12 or w.max() <= 0:
        raise SingularityError(f"restricted covariance block is singular for {names}")
    W = float(b @ vecs @ np.diag(1.0 / w) @ vecs.T @ b)
    if adjustment == "none":
        df2 = fit.df
        F = W / q
    elif adjustment == "hotelling":
        if fit.se_mode != "cluster_cr1":
            raise DomainError("hotelling adjustment applies to cluster-robust fits")
        G = fit.n_clusters
        if G <= q:
            raise DomainError(f"hotelling adjustment needs more clusters ({G}) than restrictions ({q})")
        df2 = G - q
        F = W * (G - q) / (q * (G - 1))
    else:
        raise ValueError(f"unknown adjustment {adjustment!r}")
    return WaldTest(F, q, int(df2), float(stats.f.sf(F, q, df2)), W)


def _interaction_name(fit: OlsFit, treatment: str, key: str) -> str:
    for cand in (key, f"{treatment}:{key}"):
        if cand in fit.names and cand != treatment and cand.startswith(f"{treatment}:"):
            return cand
    raise ProfileError(f"profile variable {key!r} has no interaction with {treatment!r} in the model")


def marginal_effect(fit: OlsFit, profile: Mapping[str, float], treatment: str | None = None) -> EffectReport:
    """Treatment effect gamma_1 + sum_j delta_j * I_j at the given profile.

    Profile keys may be the interacted variable (``"tenant"``) or the full
    interaction column (``"Z:tenant"``); omitted interactions are held at 0.
    """
    treatment = treatment or fit.treatment
    if treatment is None:
        raise ProfileError("fit carries no treatment name")
    j0 = fit.index(treatment)
    est = fit.coef[j0]
    a = np.zeros(fit.k)
    a[j0] = 1.0
    for key, val in profile.items():
        j = fit.index(_interaction_name(fit, treatment, key))
        val = float(val)
        a[j] = val
        if val != 0.0:
            est = est + fit.coef[j] * val
    se = math.sqrt(max(float(a @ fit.cov @ a), 0.0))
    return EffectReport.from_estimate(f"{treatment}|profile", est, se, fit.df, fit.log_outcome)


def heterogeneous_ols(design: DesignMatrices, profile: Mapping[str, float],
                      se_mode: str = "cluster_cr1") -> tuple[OlsFit, EffectReport]:
    prefix = f"{design.treatment}:"
    if not any(n.startswith(prefix) for n in design.x_names):
        raise ProfileError("design has no treatment interactions")
    fit = ols_fit(design, se_mode)
    return fit, marginal_effect(fit, profile)
