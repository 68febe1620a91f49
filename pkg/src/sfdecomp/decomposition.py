"""Split a treatment's output effect into frontier shift and efficiency change.

With ``u ~ |N(0, sigma_u^2)|`` the mean inefficiency is ``sqrt(2/pi) sigma_u``
and ``sigma_u = exp(index / 2)``, so the efficiency component of a binary
treatment is the difference of two such means, sign-flipped so that less
inefficiency reads as an output gain.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .dataset import FormulaSpec, ObservationTable, build_design
from .errors import DomainError, EmptySampleError, ProfileError, SchemaError
from .frontier import SQRT_2_OVER_PI, FrontierFit, jlms_index, sf_fit
from .linear_model import EffectReport, OlsFit, marginal_effect, ols_fit, p_value

log = logging.getLogger(__name__)


def half_normal_mean(sigma_u):
    """Mean of |N(0, sigma_u^2)|: sqrt(2/pi) * sigma_u."""
    s = np.asarray(sigma_u, dtype=float)
    if np.any(s < 0) or np.any(np.isnan(s)):
        raise DomainError("sigma_u must be nonnegative")
    out = SQRT_2_OVER_PI * s
    return float(out) if out.ndim == 0 else out


def _profile_rows(names, treatment, profile):
    """Index weights for Z=0 and Z=1 at a profile of the determinants."""
    names = list(names)
    if treatment not in names:
        raise ProfileError(f"treatment {treatment!r} does not enter the inefficiency variance")
    w0 = np.zeros(len(names))
    w1 = np.zeros(len(names))
    w0[names.index("const")] = w1[names.index("const")] = 1.0
    w1[names.index(treatment)] = 1.0
    for key, val in (profile or {}).items():
        if key not in names or key in ("const", treatment) or key.startswith(f"{treatment}:"):
            raise ProfileError(f"profile variable {key!r} is not an inefficiency determinant")
        val = float(val)
        w0[names.index(key)] = val
        w1[names.index(key)] = val
        inter = f"{treatment}:{key}"
        if inter in names:
            w1[names.index(inter)] = val
    return w0, w1


def efficiency_change(delta, names, treatment, profile=None):
    """Return (-Delta E(u), gradient w.r.t. delta) in log-output units."""
    w0, w1 = _profile_rows(names, treatment, profile)
    d = np.asarray(delta, dtype=float)
    e0, e1 = math.exp(0.5 * (w0 @ d)), math.exp(0.5 * (w1 @ d))
    value = -SQRT_2_OVER_PI * (e1 - e0)
    grad = -SQRT_2_OVER_PI * 0.5 * (e1 * w1 - e0 * w0)
    return value, grad


def _delta_slice(fit: FrontierFit) -> slice:
    k = len(fit.params.beta)
    return slice(k, k + len(fit.params.delta))


def _se(cov, a) -> float:
    if cov is None:
        return math.nan
    idx = np.flatnonzero(a)
    sub = cov[np.ix_(idx, idx)]
    if not np.all(np.isfinite(sub)):
        return math.nan
    return math.sqrt(max(float(a[idx] @ sub @ a[idx]), 0.0))


def efficiency_effect(fit: FrontierFit, profile: Mapping[str, float] | None = None) -> EffectReport:
    """Output gain from the treatment's effect on mean inefficiency, at a profile."""
    report, _ = _efficiency_parts(fit, profile)
    return report


def heterogeneous_efficiency_effect(fit: FrontierFit, profile: Mapping[str, float]) -> EffectReport:
    """Efficiency effect at a profile of determinants interacted with the treatment.

    Uses the difference of exponentials, E(u|Z=1, I) - E(u|Z=0, I); the
    factored one-exponential shortcut is not equal to it and is not offered.
    """
    if not profile:
        raise ProfileError("heterogeneous efficiency effect needs a non-empty profile")
    return efficiency_effect(fit, profile)


def _efficiency_parts(fit, profile):
    treatment = fit.treatment
    p = len(fit.names)
    if fit.boundary_flag:
        log.warning("boundary fit: efficiency effect reported as 0")
        return EffectReport.from_estimate("efficiency_effect", 0.0, math.nan, fit.df, fit.log_outcome), np.zeros(p)
    if not fit.converged:
        log.warning("efficiency effect computed from a non-converged fit")
    value, g = efficiency_change(fit.params.delta.to_numpy(float), fit.params.delta.index, treatment, profile)
    a = np.zeros(p)
    a[_delta_slice(fit)] = g
    report = EffectReport.from_estimate("efficiency_effect", value, _se(fit.cov, a), fit.df, fit.log_outcome)
    return report, a


def _frontier_parts(fit, profile):
    treatment = fit.treatment
    names = list(fit.params.beta.index)
    if treatment not in names:
        raise ProfileError(f"treatment {treatment!r} is not in the frontier")
    a = np.zeros(len(fit.names))
    a[names.index(treatment)] = 1.0
    value = float(fit.params.beta[treatment])
    for key, val in (profile or {}).items():
        inter = f"{treatment}:{key}"
        if inter in names and float(val) != 0.0:
            a[names.index(inter)] = float(val)
            value = value + float(fit.params.beta[inter]) * float(val)
    se = _se(fit.cov, a)
    return EffectReport.from_estimate("frontier_shift", value, se, fit.df, fit.log_outcome), a


@dataclass(frozen=True)
class DecompositionReport:
    frontier_shift: EffectReport
    efficiency_effect: EffectReport
    total: EffectReport
    ols_total: EffectReport | None = None
    fit: FrontierFit | None = None
    ols: OlsFit | None = None
    warnings: tuple[str, ...] = field(default_factory=tuple)

    def effects(self) -> dict[str, EffectReport | None]:
        return {"frontier_shift": self.frontier_shift, "efficiency_effect": self.efficiency_effect,
                "total": self.total, "ols_total": self.ols_total}


def decompose_fit(fit: FrontierFit, profile: Mapping[str, float] | None = None,
                  ols: OlsFit | None = None) -> DecompositionReport:
    """Assemble the decomposition from an existing frontier fit.

    ``total.estimate`` is the floating-point sum of the two reported
    components; its standard error uses the joint covariance.
    """
    frontier, af = _frontier_parts(fit, profile)
    eff, ae = _efficiency_parts(fit, profile)
    total_est = frontier.estimate + eff.estimate
    se = _se(fit.cov, af + ae)
    if fit.log_outcome:
        se = 100 * se
    t = total_est / se if se > 0 else math.nan
    total = EffectReport("total", total_est, se, t, p_value(t, fit.df), fit.df, frontier.percent_scale,
                         100 * math.expm1(total_est / 100) if frontier.percent_scale else None)
    ols_total = None
    if ols is not None:
        shared = {k: v for k, v in (profile or {}).items() if f"{fit.treatment}:{k}" in ols.names}
        ols_total = marginal_effect(ols, shared, fit.treatment) if shared else ols.effect(fit.treatment)
    warnings = list(fit.warnings)
    if fit.boundary_flag:
        warnings.append("efficiency effect set to 0 at the boundary")
    return DecompositionReport(frontier, eff, total, ols_total, fit, ols, tuple(warnings))


def decompose(design, profile=None, with_ols: bool = True, ols_se_mode: str = "cluster_cr1",
              **fit_options) -> DecompositionReport:
    """Fit the frontier (and the companion OLS) and decompose the treatment effect."""
    if design.treatment is None or design.treatment not in design.x_names:
        raise SchemaError("design must carry the treatment in X")
    if design.treatment not in design.wu_names:
        raise SchemaError("design must carry the treatment in the inefficiency variance")
    fit = sf_fit(design, **fit_options)
    ols = ols_fit(design, ols_se_mode) if with_ols else None
    return decompose_fit(fit, profile, ols)


@dataclass(frozen=True)
class DoseBin:
    index: int
    lower: float
    upper: float
    n: int
    n_clusters: int
    estimable: bool
    yield_effect: EffectReport | None
    yield_ci: tuple[float, float]
    efficiency_mean: float
    efficiency_ci: tuple[float, float]

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.lower + self.upper)


@dataclass(frozen=True)
class DoseResponse:
    dose: str
    bins: list[DoseBin]
    n_control: int
    n_treated: int
    control_efficiency: float
    excluded_treated: int
    level: float

    def plot_rows(self, panel: str = "yield") -> list[tuple[float, float, float, float]]:
        """(bin_midpoint, estimate, lo, hi) rows for the ``yield`` or ``efficiency`` panel."""
        out = []
        for b in self.bins:
            if panel == "yield":
                est = b.yield_effect.estimate if b.yield_effect is not None else math.nan
                out.append((b.midpoint, est, *b.yield_ci))
            else:
                out.append((b.midpoint, b.efficiency_mean, *b.efficiency_ci))
        return out

    def cis_overlap(self, panel: str = "yield") -> bool:
        """True when every pair of estimable bins has overlapping intervals."""
        rows = [r for r, b in zip(self.plot_rows(panel), self.bins) if b.estimable]
        if len(rows) < 2:
            return True
        return max(r[2] for r in rows) <= min(r[3] for r in rows)


def quantile_bins(values, n_bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Bin index per value using sample quantile edges; ties go to the lower bin."""
    v = np.asarray(values, dtype=float)
    edges = np.quantile(v, np.linspace(0, 1, n_bins + 1))
    idx = np.searchsorted(edges[1:-1], v, side="left")
    return idx, edges


def effect_by_dose(table: ObservationTable, spec: FormulaSpec, dose: str, n_bins: int = 10, seed: int | None = None,
                   n_boot: int = 200, level: float = 0.95, zero_policy="drop", fit: FrontierFit | None = None,
                   with_efficiency: bool = True, se_mode: str = "cluster_cr1") -> DoseResponse:
    """Treatment effects by quantile bin of the dose among treated units.

    Yield: one regression on the model's inputs and covariates with one
    indicator per dose bin against the pooled control group (cluster-robust).
    Efficiency: mean JLMS technical efficiency per bin from a frontier fitted
    on the same sample, with a percentile cluster-bootstrap interval
    (clusters resampled within the bin; the frontier is not refitted).
    """
    if n_bins < 1:
        raise DomainError("n_bins must be at least 1")
    if with_efficiency and seed is None:
        raise DomainError("a seed is required for the bootstrap intervals")
    if dose not in table.columns:
        raise SchemaError(f"dose column {dose!r} absent from table")
    spec.validate(table)
    z = table[spec.treatment].to_numpy(float)
    d = table[dose].to_numpy(float)
    takers = (z == 1) & (d > 0)
    keep = (z == 0) | takers
    sample = table.select(keep, reason="treated without dose")
    excluded_treated = int(((z == 1) & ~takers).sum())
    design = build_design(sample, spec, zero_policy)
    zi = design.x_names.index(spec.treatment)
    zcol = design.X[:, zi]
    dose_v = sample.frame[dose].reindex(design.row_index).to_numpy(float)
    treated = zcol == 1
    if treated.sum() == 0 or (~treated).sum() == 0:
        raise EmptySampleError("dose binning needs treated takers and controls")

    bin_idx, edges = quantile_bins(dose_v[treated], n_bins)
    full_bins = np.full(design.n, -1)
    full_bins[treated] = bin_idx
    dummies, names, present = [], [], []
    for b in range(n_bins):
        col = (full_bins == b).astype(float)
        if col.sum() > 0:
            dummies.append(col)
            names.append(f"{spec.treatment}[bin{b + 1}]")
            present.append(b)
    X = np.column_stack([design.X[:, :zi], *dummies, design.X[:, zi + 1:]])
    x_names = design.x_names[:zi] + tuple(names) + design.x_names[zi + 1:]
    bin_design = replace(design, X=X, x_names=x_names)
    ols = ols_fit(bin_design, se_mode)

    te = None
    ctrl_eff = math.nan
    if with_efficiency:
        if fit is None:
            fit = sf_fit(design)
        te = jlms_index(fit, design).te
        ctrl_eff = float(te[~treated].mean())
    children = np.random.SeedSequence(seed).spawn(n_bins) if with_efficiency else [None] * n_bins
    alpha = 1 - level

    bins = []
    for b in range(n_bins):
        mask = full_bins == b
        n_b = int(mask.sum())
        clusters = np.unique(design.cluster_ids[mask])
        estimable = len(clusters) >= 2 and b in present
        eff = None
        yci = (math.nan, math.nan)
        if estimable:
            eff = ols.effect(names[present.index(b)])
            yci = eff.ci(level)
        em, eci = math.nan, (math.nan, math.nan)
        if te is not None and n_b:
            em = float(te[mask].mean())
            if estimable:
                eci = _cluster_bootstrap_ci(te[mask], design.cluster_ids[mask], n_boot, alpha,
                                            np.random.default_rng(children[b]))
        bins.append(DoseBin(b + 1, float(edges[b]), float(edges[b + 1]), n_b, len(clusters), estimable,
                            eff, yci, em, eci))
    return DoseResponse(dose, bins, int((~treated).sum()), int(treated.sum()), ctrl_eff, excluded_treated, level)


def _cluster_bootstrap_ci(values, clusters, n_boot, alpha, rng):
    labels, inv = np.unique(clusters, return_inverse=True)
    G = len(labels)
    sums = np.bincount(inv, weights=values, minlength=G)
    counts = np.bincount(inv, minlength=G)
    draws = rng.integers(0, G, size=(n_boot, G))
    means = sums[draws].sum(axis=1) / counts[draws].sum(axis=1)
    lo, hi = np.quantile(means, [alpha / 2, 1 - alpha / 2])
    return float(lo), float(hi)
