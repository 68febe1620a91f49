"""Design diagnostics: residual skewness, balance, attrition, kernel density."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .dataset import DesignMatrices, FormulaSpec, ObservationTable
from .errors import DegenerateError, DomainError, SchemaError
from .linear_model import EffectReport, OlsFit, itt_fit, ols_fit, wald_joint_test

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SkewnessTestResult:
    m2: float
    m3: float
    z_stat: float
    p_value: float
    direction: str
    n: int

    def rejects(self, alpha: float = 0.05) -> bool:
        return self.p_value < alpha


def skewness_test(residuals, alpha: float = 0.05) -> SkewnessTestResult:
    """Moment test of zero skewness: z = m3 / sqrt(6 m2^3 / n).

    ``direction`` is ``symmetric`` unless the two-sided test rejects at
    ``alpha``; a significant ``negative_skew`` is what a production frontier
    needs.
    """
    r = np.asarray(residuals, dtype=float)
    n = r.size
    if n < 10:
        raise DomainError(f"skewness test needs n >= 10, got {n}")
    d = r - r.mean()
    m2 = float(np.mean(d**2))
    m3 = float(np.mean(d**3))
    if m2 <= 0 or m2 <= 1e-300:
        raise DegenerateError("residuals are constant")
    if abs(m3) <= 1e-12 * m2**1.5:
        m3 = 0.0
    z = m3 / math.sqrt(6 * m2**3 / n)
    p = float(2 * stats.norm.sf(abs(z)))
    if p >= alpha or z == 0:
        direction = "symmetric"
    else:
        direction = "negative_skew" if z < 0 else "positive_skew"
    return SkewnessTestResult(m2, m3, z, p, direction, n)


@dataclass(frozen=True)
class BalanceRow:
    name: str
    control_mean: float
    control_se: float
    treatment_mean: float
    treatment_se: float
    difference: float
    p_value: float
    n: int
    flagged: bool = False


@dataclass(frozen=True)
class BalanceReport:
    rows: list[BalanceRow]
    joint_F: float
    joint_df: tuple[int, int]
    joint_p: float
    joint_variables: tuple[str, ...]
    adjustment: str
    n_clusters: int

    def row(self, name: str) -> BalanceRow:
        return next(r for r in self.rows if r.name == name)


def _frame_design(frame, y_col, x_cols, cluster, treatment=None) -> DesignMatrices:
    n = len(frame)
    X = np.column_stack([np.ones(n)] + [frame[c].to_numpy(float) for c in x_cols])
    return DesignMatrices(y=frame[y_col].to_numpy(float), X=X, x_names=("const", *x_cols),
                          cluster_ids=frame[cluster].astype(str).to_numpy(),
                          row_index=frame.index.to_numpy(), treatment=treatment)


def _arm_mean(frame, var, cluster) -> tuple[float, float]:
    vals = frame[var].to_numpy(float)
    if vals.size == 0:
        return math.nan, math.nan
    design = _frame_design(frame, var, [], cluster)
    if design.n_clusters < 2 or design.n < 2:
        return float(vals.mean()), math.nan
    fit = ols_fit(design, "cluster_cr1")
    return float(fit.coef[0]), float(math.sqrt(fit.cov[0, 0]))


def balance_table(table: ObservationTable, variables: Sequence[str], treatment: str, cluster: str | None = None,
                  joint_adjustment: str = "hotelling") -> BalanceReport:
    """Arm means, per-variable cluster-robust p-values and a joint orthogonality F.

    Each row's p-value comes from regressing the variable on the treatment
    (identical to :func:`itt_effect` on that variable). The joint test
    regresses the treatment on all unflagged variables and tests the slopes
    together; ``joint_adjustment`` is passed to :func:`wald_joint_test`.
    """
    cluster = cluster or table.cluster
    variables = list(dict.fromkeys(variables))
    missing = [v for v in [*variables, treatment, cluster] if v not in table.columns]
    if missing:
        raise SchemaError(f"columns absent from table: {missing}")
    z = table[treatment].dropna()
    if not z.isin([0, 1]).all() or z.nunique() < 2:
        raise DomainError("treatment must be binary with both arms present")

    rows = []
    usable = []
    for var in variables:
        frame = table.frame[[var, treatment, cluster]].dropna()
        ctrl = frame[frame[treatment] == 0]
        trt = frame[frame[treatment] == 1]
        flagged = (ctrl[var].nunique() <= 1) and (trt[var].nunique() <= 1)
        cm, cse = _arm_mean(ctrl, var, cluster)
        tm, tse = _arm_mean(trt, var, cluster)
        if flagged:
            log.warning("balance variable %r is constant within both arms; excluded from joint test", var)
            rows.append(BalanceRow(var, cm, cse, tm, tse, tm - cm, math.nan, len(frame), True))
            continue
        spec = FormulaSpec(outcome=var, treatment=treatment, cluster=cluster, log_outcome=False)
        eff = itt_fit(table, spec).effect(treatment)
        p = eff.p_value
        scale = float(frame[var].abs().max())
        if abs(eff.estimate) <= 1e-12 * max(scale, 1e-300):
            # arm difference is rounding noise; t would be noise over noise
            p = 1.0
        rows.append(BalanceRow(var, cm, cse, tm, tse, eff.estimate, p, len(frame)))
        usable.append(var)

    if not usable:
        raise DegenerateError("no usable balance variables")
    frame = table.frame[[*usable, treatment, cluster]].dropna()
    fit = ols_fit(_frame_design(frame, treatment, usable, cluster), "cluster_cr1")
    w = wald_joint_test(fit, usable, adjustment=joint_adjustment)
    return BalanceReport(rows, w.F, (w.df1, w.df2), w.p_value, tuple(usable), joint_adjustment, fit.n_clusters)


@dataclass(frozen=True)
class AttritionReport:
    rate_control: float
    rate_treatment: float
    rate_overall: float
    n_baseline: int
    n_control: int
    n_treatment: int
    n_attrited: int
    without_covariates: OlsFit | None
    with_covariates: OlsFit | None
    degenerate: bool
    warnings: tuple[str, ...] = field(default_factory=tuple)

    def effects(self) -> dict[str, EffectReport]:
        out = {}
        for key, fit in (("without_covariates", self.without_covariates), ("with_covariates", self.with_covariates)):
            if fit is not None:
                out[key] = fit.effect(fit.treatment, percent=False)
        return out


def attrition_check(panel: ObservationTable, treatment: str, covariates: Sequence[str] = (),
                    cluster: str | None = None) -> AttritionReport:
    """Linear probability model of attrition on treatment, without and with covariates.

    A baseline unit counts as attrited when it has no follow-up row.
    """
    if panel.period is None:
        raise SchemaError("attrition check needs a period column")
    cluster = cluster or panel.cluster
    df = panel.frame
    base = df[df[panel.period] == "baseline"].copy()
    follow_ids = set(df.loc[df[panel.period] == "followup", panel.unit])
    if base.empty:
        raise SchemaError("panel has no baseline rows")
    base["_attrited"] = (~base[panel.unit].isin(follow_ids)).astype(float)
    base = base.dropna(subset=[treatment, cluster])
    zb = base[treatment]
    a = base["_attrited"]
    n_c, n_t = int((zb == 0).sum()), int((zb == 1).sum())
    rc = float(a[zb == 0].mean()) if n_c else math.nan
    rt = float(a[zb == 1].mean()) if n_t else math.nan
    ro = float(a.mean())
    n_att = int(a.sum())

    warnings = []
    fits = [None, None]
    degenerate = n_att == 0 or n_att == len(base)
    if degenerate:
        warnings.append("attrition indicator is constant; regressions not estimated")
    else:
        for i, covs in enumerate([[], list(covariates)]):
            frame = base[["_attrited", treatment, cluster, *covs]].dropna()
            design = _frame_design(frame, "_attrited", [treatment, *covs], cluster, treatment)
            fits[i] = ols_fit(design, "cluster_cr1")
        if not covariates:
            fits[1] = None
    return AttritionReport(rc, rt, ro, len(base), n_c, n_t, n_att, fits[0], fits[1], degenerate, tuple(warnings))


def silverman_bandwidth(values) -> float:
    x = np.asarray(values, dtype=float)
    sd = float(np.std(x, ddof=1))
    q75, q25 = np.percentile(x, [75, 25])
    a = min(sd, (q75 - q25) / 1.34)
    if a <= 0:
        a = sd
    return 0.9 * a * x.size ** (-0.2)


@dataclass(frozen=True)
class DensityEstimate:
    x: np.ndarray
    density: np.ndarray
    bandwidth: float
    warning: str | None = None

    def rows(self):
        return list(zip(self.x.tolist(), self.density.tolist()))

    def to_text(self, delimiter: str = ",") -> str:
        lines = [f"x{delimiter}density"] + [f"{x!r}{delimiter}{d!r}" for x, d in self.rows()]
        return "\n".join(lines) + "\n"


def density_export(values, grid_size: int = 512, bandwidth="silverman") -> DensityEstimate:
    """Gaussian kernel density on an even grid over [min - 3h, max + 3h].

    The kernel mass beyond the grid ends is put back by rescaling, so the
    trapezoidal integral over the grid is 1.
    """
    x = np.asarray(values, dtype=float)
    if x.size < 2:
        raise DomainError("density export needs at least 2 values")
    if not np.all(np.isfinite(x)):
        raise DomainError("density export needs finite values")
    if grid_size < 2:
        raise DomainError("grid_size must be at least 2")
    if np.ptp(x) == 0:
        v = float(x[0])
        w = 1e-8 * max(1.0, abs(v))
        msg = "zero variance: density is a spike at %r" % v
        log.warning(msg)
        return DensityEstimate(np.array([v - w / 2, v + w / 2]), np.array([1 / w, 1 / w]), 0.0, msg)
    if bandwidth == "silverman":
        h = silverman_bandwidth(x)
    else:
        h = float(bandwidth)
        if not h > 0:
            raise DomainError("bandwidth must be positive")
    grid = np.linspace(x.min() - 3 * h, x.max() + 3 * h, grid_size)
    dens = np.zeros(grid_size)
    for start in range(0, x.size, 4096):
        chunk = x[start:start + 4096]
        dens += stats.norm.pdf((grid[:, None] - chunk[None, :]) / h).sum(axis=1)
    dens /= x.size * h
    dens *= 1.0 / np.trapezoid(dens, grid)
    return DensityEstimate(grid, dens, h)
