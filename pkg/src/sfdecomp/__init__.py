"""Stochastic frontier decomposition of randomized treatment effects."""

from .dataset import (
    DesignMatrices,
    FormulaSpec,
    ObservationTable,
    TableSchema,
    ZeroPolicy,
    build_design,
    load_table,
    per_unit_transform,
    shift_epsilon,
)
from .decomposition import (
    DecompositionReport,
    DoseResponse,
    decompose,
    decompose_fit,
    effect_by_dose,
    efficiency_effect,
    heterogeneous_efficiency_effect,
    half_normal_mean,
)
from .diagnostics import attrition_check, balance_table, density_export, skewness_test
from .frontier import FrontierFit, FrontierParams, InefficiencyIndex, jlms_index, sf_fit, sf_loglik
from .linear_model import EffectReport, OlsFit, heterogeneous_ols, itt_effect, ols_fit, wald_joint_test
from .synthetic import DgpConfig, MonteCarloSummary, generate, monte_carlo, quadrature_oracle

__version__ = "0.1.0"
