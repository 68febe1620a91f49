"""Synthetic clustered frontier data, Monte Carlo batteries and quadrature references.

Seed splitting: replication ``r`` of a Monte Carlo run with master seed ``s``
draws its data from ``SeedSequence(s, spawn_key=(r,))``. The derivation only
depends on ``(s, r)``, so serial, parallel and reordered runs produce the
same numbers.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping

import numpy as np
import pandas as pd
from scipy import integrate, optimize

from .dataset import FormulaSpec, ObservationTable, build_design
from .decomposition import decompose_fit
from .diagnostics import balance_table, skewness_test
from .errors import EstimationError, PrecisionError, ValidationError
from .frontier import SQRT_2_OVER_PI, sf_fit
from .linear_model import critical_value, ols_fit

log = logging.getLogger(__name__)


def lognormal_from_moments(mean: float, sd: float) -> tuple[float, float]:
    """(mu, sigma) of a log-normal with the given mean and standard deviation."""
    s2 = math.log1p((sd / mean) ** 2)
    return math.log(mean) - s2 / 2, math.sqrt(s2)


# Baseline means and SDs of the main inputs (land in decimals, labor in days,
# seed and fertilizer in kg).
DEFAULT_INPUT_LAW = {
    "land": lognormal_from_moments(99.70, 85.28),
    "labor": lognormal_from_moments(46.37, 39.80),
    "seed": lognormal_from_moments(17.27, 18.80),
    "fertilizer": lognormal_from_moments(168.30, 150.62),
}
DEFAULT_BETA = {"const": 1.0, "land": 0.55, "labor": 0.15, "seed": 0.1, "fertilizer": 0.15}


def delta_for_sigmas(sigma_u0: float, sigma_u1: float) -> dict[str, float]:
    """(delta_0, delta_1) giving sigma_u = sigma_u0 in control and sigma_u1 under treatment."""
    return {"const": 2 * math.log(sigma_u0), "Z": 2 * (math.log(sigma_u1) - math.log(sigma_u0))}


@dataclass(frozen=True)
class DgpConfig:
    """Clustered Cobb-Douglas frontier with log-linear inefficiency variance.

    ``delta_true`` is keyed by ``const``, the treatment name, covariate names
    and ``<treatment>:<covariate>``; ``const = -inf`` switches inefficiency
    off. ``beta_true`` is keyed by ``const``, input names, covariate names and
    interactions; the treatment's own frontier coefficient is ``gamma1_true``.
    ``covariates`` maps a name to ``("binary", p)`` or ``("normal", mean, sd)``.
    Treatment is assigned to ``round(treatment_share * G)`` whole clusters.
    """

    n: int = 3000
    n_clusters: int = 40
    cluster_effect_sd: float = 0.0
    beta_true: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_BETA))
    gamma1_true: float = 0.11
    delta_true: Mapping[str, float] = field(default_factory=lambda: delta_for_sigmas(0.2, 0.2 - 0.03 / SQRT_2_OVER_PI))
    sigma_v: float = 0.15
    treatment_share: float = 0.5
    input_law: Mapping[str, tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_INPUT_LAW))
    covariates: Mapping[str, tuple] = field(default_factory=dict)
    dose_law: tuple[float, float] | None = None
    takeup: float = 1.0
    attrition: tuple[float, float] | None = None
    treatment: str = "Z"
    cluster: str = "branch"
    outcome: str = "rice"
    dose: str = "credit"
    seed: int = 0

    def __post_init__(self):
        if self.n_clusters < 2:
            raise ValidationError("need at least 2 clusters")
        if self.n < self.n_clusters:
            raise ValidationError("need at least one unit per cluster")
        if not 0 < self.treatment_share < 1:
            raise ValidationError("treatment_share must lie in (0, 1)")
        if self.cluster_effect_sd < 0 or not self.sigma_v > 0:
            raise ValidationError("standard deviations must be nonnegative (sigma_v positive)")
        if not 0 < self.takeup <= 1:
            raise ValidationError("takeup must lie in (0, 1]")
        for name, law in self.input_law.items():
            if law[1] < 0:
                raise ValidationError(f"input {name!r} has a negative log-scale")

    @classmethod
    def from_dict(cls, data: Mapping) -> "DgpConfig":
        data = dict(data)
        for key in ("input_law", "covariates"):
            if key in data:
                data[key] = {k: tuple(v) for k, v in data[key].items()}
        for key in ("dose_law", "attrition"):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        if "delta_true" in data:
            data["delta_true"] = {k: (-math.inf if v is None else float(v)) for k, v in data["delta_true"].items()}
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["delta_true"] = {k: (None if v == -math.inf else v) for k, v in self.delta_true.items()}
        return d

    @property
    def inputs(self) -> list[str]:
        return list(self.input_law)

    def sigma_u(self, z, cov_values: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        idx = np.zeros(z.shape)
        for key, val in self.delta_true.items():
            if key == "const":
                idx = idx + val
            elif key == self.treatment:
                idx = idx + val * z
            elif key.startswith(f"{self.treatment}:"):
                idx = idx + val * z * cov_values[key.split(":", 1)[1]]
            else:
                idx = idx + val * cov_values[key]
        with np.errstate(invalid="ignore"):
            return np.exp(0.5 * idx)

    def true_efficiency_effect(self) -> float:
        """-Delta E(u) at the zero profile, in log-output units."""
        d0 = self.delta_true.get("const", 0.0)
        d1 = self.delta_true.get(self.treatment, 0.0)
        if d0 == -math.inf:
            return 0.0
        return -SQRT_2_OVER_PI * (math.exp(0.5 * (d0 + d1)) - math.exp(0.5 * d0))

    def formula(self, **overrides) -> FormulaSpec:
        covs = tuple(self.covariates)
        dets = tuple(k for k in self.delta_true if k not in ("const", self.treatment) and ":" not in k)
        inter = tuple(k.split(":", 1)[1] for k in {**self.beta_true, **self.delta_true}
                      if k.startswith(f"{self.treatment}:"))
        fields = dict(
            outcome=self.outcome, treatment=self.treatment, cluster=self.cluster,
            inputs=[(name, True) for name in self.inputs], log_outcome=True,
            covariates=tuple(c for c in covs if c in self.beta_true or f"{self.treatment}:{c}" in self.beta_true),
            interactions=tuple(dict.fromkeys(inter)), ineff_determinants=dets,
        )
        fields.update(overrides)
        return FormulaSpec(**fields)


def _draw_covariates(config, rng, n):
    out = {}
    for name, law in config.covariates.items():
        kind = law[0]
        if kind == "binary":
            out[name] = (rng.random(n) < law[1]).astype(float)
        elif kind == "normal":
            out[name] = rng.normal(law[1], law[2], n)
        else:
            raise ValidationError(f"unknown covariate law {kind!r} for {name!r}")
    return out


def _frontier_index(config, log_inputs, z, covs):
    idx = np.full(z.shape, config.beta_true.get("const", 0.0))
    for name in config.inputs:
        idx = idx + config.beta_true.get(name, 0.0) * log_inputs[name]
    idx = idx + config.gamma1_true * z
    for key, val in config.beta_true.items():
        if key in ("const", *config.inputs):
            continue
        if key.startswith(f"{config.treatment}:"):
            idx = idx + val * z * covs[key.split(":", 1)[1]]
        else:
            idx = idx + val * covs[key]
    return idx


def generate(config: DgpConfig) -> ObservationTable:
    """Draw one synthetic sample.

    ``ln y = X beta + gamma1 Z - u + v + c_g`` with ``u = |N(0, sigma_u^2(Z))|``,
    ``v ~ N(0, sigma_v^2)`` and a cluster effect ``c_g ~ N(0, cluster_effect_sd^2)``
    in the noise. The latent ``u_true`` and ``v_true`` (noise incl. cluster
    effect) are emitted as columns. With ``attrition`` set, a baseline wave
    (treatment effects off) precedes the follow-up and units drop out of the
    follow-up with the given (control, treatment) probabilities.
    """
    rng = np.random.default_rng(config.seed)
    n, G = config.n, config.n_clusters
    sizes = np.full(G, n // G)
    sizes[: n % G] += 1
    cluster = np.repeat(np.arange(G), sizes)
    n_treat = min(max(int(round(config.treatment_share * G)), 1), G - 1)
    treated_clusters = rng.permutation(G)[:n_treat]
    z = np.isin(cluster, treated_clusters).astype(float)
    covs = _draw_covariates(config, rng, n)
    c_eff = rng.normal(0.0, config.cluster_effect_sd, G) if config.cluster_effect_sd > 0 else np.zeros(G)

    def wave(zw):
        log_inputs = {name: rng.normal(mu, sd, n) for name, (mu, sd) in config.input_law.items()}
        su = config.sigma_u(zw, covs)
        u = np.abs(rng.standard_normal(n)) * np.nan_to_num(su)
        v = rng.normal(0.0, config.sigma_v, n) + c_eff[cluster]
        ln_y = _frontier_index(config, log_inputs, zw, covs) - u + v
        return log_inputs, u, v, ln_y

    waves = []
    if config.attrition is not None:
        waves.append(("baseline", wave(np.zeros(n)), np.ones(n, dtype=bool)))
    follow = wave(z)
    if config.attrition is not None:
        p = np.where(z == 1, config.attrition[1], config.attrition[0])
        stay = rng.random(n) >= p
    else:
        stay = np.ones(n, dtype=bool)
    waves.append(("followup", follow, stay))

    dose = np.zeros(n)
    if config.dose_law is not None:
        take = (z == 1) & (rng.random(n) < config.takeup)
        dose[take] = np.exp(rng.normal(config.dose_law[0], config.dose_law[1], int(take.sum())))

    frames = []
    unit = np.array([f"u{i:06d}" for i in range(n)])
    branch = np.array([f"b{g:03d}" for g in cluster])
    for period, (log_inputs, u, v, ln_y), keep in waves:
        cols = {"unit": unit, "period": period, config.cluster: branch, config.treatment: z}
        for name in config.inputs:
            cols[name] = np.exp(log_inputs[name])
        for name, vals in covs.items():
            cols[name] = vals
        if config.dose_law is not None:
            cols[config.dose] = dose if period == "followup" else np.zeros(n)
        cols[config.outcome] = np.exp(ln_y)
        cols["u_true"] = u
        cols["v_true"] = v
        frames.append(pd.DataFrame(cols).loc[keep])
    frame = pd.concat(frames, ignore_index=True)
    frame.index = pd.RangeIndex(1, len(frame) + 1, name="row")
    kinds = {config.treatment: "binary", **{c: ("binary" if l[0] == "binary" else "continuous")
                                           for c, l in config.covariates.items()}}
    kinds.update({c: "continuous" for c in [*config.inputs, config.outcome, "u_true", "v_true"]})
    return ObservationTable(frame, "unit", config.cluster, "period", kinds)


def rep_seed(master_seed: int, rep: int) -> int:
    """64-bit seed of replication ``rep`` (counter-based, order independent)."""
    ss = np.random.SeedSequence(master_seed, spawn_key=(rep,))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class ParamSummary:
    name: str
    true: float
    mean: float
    bias: float
    rmse: float
    coverage: float
    mc_se: float
    n: int


@dataclass(frozen=True)
class MonteCarloSummary:
    estimator: str
    reps: int
    master_seed: int
    failures: int
    params: list[ParamSummary]
    rejection_rate: float | None = None
    extra: Mapping[str, float] = field(default_factory=dict)

    def param(self, name: str) -> ParamSummary:
        return next(p for p in self.params if p.name == name)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(p) for p in self.params]).set_index("name")


def _ols_truth(config: DgpConfig, names) -> dict[str, float]:
    d0 = config.delta_true.get("const", -math.inf)
    eu0 = 0.0 if d0 == -math.inf else SQRT_2_OVER_PI * math.exp(0.5 * d0)
    only_z = set(config.delta_true) <= {"const", config.treatment}
    truth = {}
    for name in names:
        if name == "const":
            truth[name] = config.beta_true.get("const", 0.0) - eu0 if only_z else math.nan
        elif name == config.treatment:
            truth[name] = config.gamma1_true + config.true_efficiency_effect() if only_z else math.nan
        elif name.startswith("ln_"):
            truth[name] = config.beta_true.get(name[3:], 0.0)
        else:
            truth[name] = config.beta_true.get(name, math.nan)
    return truth


def _one_rep(args):
    config, estimator, options, rep, master_seed = args
    cfg = replace(config, seed=rep_seed(master_seed, rep))
    table = generate(cfg)
    spec = cfg.formula()
    try:
        if estimator == "ols":
            design = build_design(table, spec)
            fit = ols_fit(design, options.get("se_mode", "cluster_cr1"))
            se = fit.std_errors.to_numpy()
            return {"ok": True, "est": dict(zip(fit.names, zip(fit.coef, se, [fit.df] * fit.k)))}
        if estimator in ("sfa", "decompose"):
            design = build_design(table, spec)
            fit = sf_fit(design, se_mode=options.get("sfa_se_mode", "hessian"))
            if not fit.converged:
                return {"ok": False}
            if estimator == "sfa":
                se = fit.std_errors().to_numpy()
                return {"ok": True, "boundary": fit.boundary_flag,
                        "est": dict(zip(fit.names, zip(fit.params.vector(), se, [fit.df] * len(se))))}
            rep_ = decompose_fit(fit)
            scale = 100.0 if fit.log_outcome else 1.0
            est = {k: (e.estimate / scale, e.std_error / scale, e.df)
                   for k, e in rep_.effects().items() if e is not None}
            return {"ok": True, "boundary": fit.boundary_flag, "est": est}
        if estimator == "skewness":
            design = build_design(table, spec)
            fit = ols_fit(design, "classical")
            res = skewness_test(fit.residuals, options.get("alpha", 0.05))
            return {"ok": True, "reject": res.p_value < options.get("alpha", 0.05),
                    "est": {"z_stat": (res.z_stat, math.nan, None)}}
        if estimator == "balance":
            variables = options.get("variables") or list(cfg.covariates)
            rep_ = balance_table(table.in_period("baseline") if cfg.attrition else table, variables,
                                 cfg.treatment, cfg.cluster, options.get("joint_adjustment", "hotelling"))
            return {"ok": True, "reject": rep_.joint_p < options.get("alpha", 0.05),
                    "est": {"joint_F": (rep_.joint_F, math.nan, None)}}
    except (EstimationError, ValidationError) as exc:
        log.info("replication %d failed: %s", rep, exc)
        return {"ok": False}
    raise ValueError(f"unknown estimator {estimator!r}")


ESTIMATORS = ("ols", "sfa", "decompose", "skewness", "balance")


def _truth(config: DgpConfig, estimator: str, names) -> dict[str, float]:
    if estimator == "ols":
        return _ols_truth(config, names)
    if estimator == "sfa":
        truth = {}
        for name in names:
            kind, _, key = name.partition(":")
            if kind == "beta":
                if key == config.treatment:
                    truth[name] = config.gamma1_true
                elif key.startswith("ln_"):
                    truth[name] = config.beta_true.get(key[3:], 0.0)
                else:
                    truth[name] = config.beta_true.get(key, 0.0)
            elif kind == "delta":
                truth[name] = config.delta_true.get(key, 0.0)
            else:
                truth[name] = 2 * math.log(config.sigma_v) if key == "const" else math.nan
        return truth
    if estimator == "decompose":
        eff = config.true_efficiency_effect()
        return {"frontier_shift": config.gamma1_true, "efficiency_effect": eff,
                "total": config.gamma1_true + eff, "ols_total": math.nan}
    return {name: math.nan for name in names}


def monte_carlo(config: DgpConfig, estimator: str, reps: int, master_seed: int, workers: int = 1,
                **options) -> MonteCarloSummary:
    """Repeat generate + estimate ``reps`` times and summarize.

    Coverage uses the estimator's own interval: t(df) when the estimate
    carries degrees of freedom, normal otherwise. Test-type estimators
    (``skewness``, ``balance``) report a rejection rate.
    """
    if estimator not in ESTIMATORS:
        raise ValueError(f"estimator must be one of {ESTIMATORS}")
    if reps < 2:
        raise ValidationError("need at least 2 replications")
    jobs = [(config, estimator, options, r, master_seed) for r in range(reps)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_one_rep, jobs, chunksize=max(1, reps // (4 * workers))))
    else:
        results = [_one_rep(j) for j in jobs]

    ok = [r for r in results if r["ok"]]
    failures = reps - len(ok)
    if not ok:
        raise EstimationError(f"all {reps} replications failed")
    names = list(ok[0]["est"])
    truth = _truth(config, estimator, names)
    level = options.get("level", 0.95)
    params = []
    for name in names:
        vals = np.array([r["est"][name][0] for r in ok if name in r["est"]], dtype=float)
        ses = np.array([r["est"][name][1] for r in ok if name in r["est"]], dtype=float)
        dfs = [r["est"][name][2] for r in ok if name in r["est"]]
        t0 = truth.get(name, math.nan)
        mean = float(np.mean(vals))
        mc_se = float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else math.nan
        if np.isfinite(t0):
            bias = mean - t0
            rmse = float(math.sqrt(np.mean((vals - t0) ** 2)))
            crit = np.array([critical_value(df, level) for df in dfs])
            good = np.isfinite(ses)
            cover = float(np.mean(np.abs(vals[good] - t0) <= crit[good] * ses[good])) if good.any() else math.nan
        else:
            bias = rmse = cover = math.nan
        params.append(ParamSummary(name, t0, mean, bias, rmse, cover, mc_se, len(vals)))
    rejection = None
    if estimator in ("skewness", "balance"):
        rejection = float(np.mean([r["reject"] for r in ok]))
    extra = {}
    if estimator in ("sfa", "decompose"):
        extra["boundary_rate"] = float(np.mean([r["boundary"] for r in ok]))
    return MonteCarloSummary(estimator, reps, master_seed, failures, params, rejection, extra)


QUAD_KINDS = ("loglik_cell", "jlms")


def quadrature_oracle(kind: str, eps: float, sigma_u: float, sigma_v: float, tol: float = 1e-10) -> float:
    """Numerical-integration reference for one composed-error cell.

    Integrates ``phi((eps + u)/sigma_v)/sigma_v * (2/sigma_u) phi(u/sigma_u)``
    over u >= 0. The integrand is rescaled by its numerically located maximum
    so that tiny densities keep full relative precision. ``loglik_cell``
    returns the log of the integral; ``jlms`` the conditional mean of u.
    """
    if kind not in QUAD_KINDS:
        raise ValueError(f"kind must be one of {QUAD_KINDS}")
    if not (sigma_u > 0 and sigma_v > 0):
        raise ValueError("sigma_u and sigma_v must be positive")

    log_c = math.log(2.0) - math.log(2 * math.pi) - math.log(sigma_u) - math.log(sigma_v)

    def log_f(u):
        return log_c - 0.5 * ((eps + u) / sigma_v) ** 2 - 0.5 * (u / sigma_u) ** 2

    width = 1.0 / math.sqrt(sigma_u**-2 + sigma_v**-2)
    hi = abs(eps) + 50 * (sigma_u + sigma_v)
    opt = optimize.minimize_scalar(lambda u: -log_f(u), bounds=(0.0, hi), method="bounded",
                                   options={"xatol": 1e-12 * max(1.0, hi)})
    u_max = float(opt.x) if log_f(opt.x) > log_f(0.0) else 0.0
    peak = log_f(u_max)

    def g(u):
        return math.exp(log_f(u) - peak)

    a = max(0.0, u_max - 40 * width)
    b = u_max + 40 * width
    pieces = ([(0.0, a)] if a > 0 else []) + [(a, u_max), (u_max, b)]

    def integrate_all(fn):
        total, err = 0.0, 0.0
        for lo, up in pieces:
            if up > lo:
                v, e = integrate.quad(fn, lo, up, epsabs=tol / 10, epsrel=1e-13, limit=200)
                total += v
                err += e
        v, e = integrate.quad(fn, b, math.inf, epsabs=tol / 10, epsrel=1e-13, limit=200)
        return total + v, err + e

    den, err_d = integrate_all(g)
    if err_d > tol * max(1.0, den):
        raise PrecisionError(f"quadrature error {err_d:.2e} exceeds tolerance {tol:.1e}")
    if kind == "loglik_cell":
        return peak + math.log(den)
    num, err_n = integrate_all(lambda u: u * g(u))
    if err_n > tol * max(1.0, num):
        raise PrecisionError(f"quadrature error {err_n:.2e} exceeds tolerance {tol:.1e}")
    return num / den
